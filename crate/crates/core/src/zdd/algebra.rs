use rustc_hash::FxHashMap;

use super::{Manager, NodeId, VarId, TERMINAL_VAR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SetOp {
    Union,
    Intersection,
    Difference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RestrictMode {
    /// Keep members containing the variable (the variable stays in them).
    Contains,
    /// Keep members not containing the variable.
    Excludes,
}

#[derive(Default)]
pub(crate) struct Caches {
    union: FxHashMap<(NodeId, NodeId), NodeId>,
    intersection: FxHashMap<(NodeId, NodeId), NodeId>,
    difference: FxHashMap<(NodeId, NodeId), NodeId>,
    join: FxHashMap<(NodeId, NodeId), NodeId>,
}

#[inline]
fn ordered(f: NodeId, g: NodeId) -> (NodeId, NodeId) {
    if f <= g {
        (f, g)
    } else {
        (g, f)
    }
}

impl Manager {
    pub fn apply(&mut self, op: SetOp, f: NodeId, g: NodeId) -> NodeId {
        match op {
            SetOp::Union => self.union(f, g),
            SetOp::Intersection => self.intersection(f, g),
            SetOp::Difference => self.difference(f, g),
        }
    }

    pub fn union(&mut self, f: NodeId, g: NodeId) -> NodeId {
        if f == NodeId::BOTTOM || f == g {
            return g;
        }
        if g == NodeId::BOTTOM {
            return f;
        }
        if self.exhausted {
            return NodeId::BOTTOM;
        }
        let key = ordered(f, g);
        if let Some(&r) = self.caches.union.get(&key) {
            return r;
        }
        let (nf, ng) = (self.node(f), self.node(g));
        let r = if nf.var < ng.var {
            let lo = self.union(nf.lo, g);
            self.mk(nf.var, lo, nf.hi)
        } else if nf.var > ng.var {
            let lo = self.union(f, ng.lo);
            self.mk(ng.var, lo, ng.hi)
        } else {
            let lo = self.union(nf.lo, ng.lo);
            let hi = self.union(nf.hi, ng.hi);
            self.mk(nf.var, lo, hi)
        };
        self.caches.union.insert(key, r);
        r
    }

    pub fn intersection(&mut self, f: NodeId, g: NodeId) -> NodeId {
        if f == NodeId::BOTTOM || g == NodeId::BOTTOM {
            return NodeId::BOTTOM;
        }
        if f == g {
            return f;
        }
        let key = ordered(f, g);
        if let Some(&r) = self.caches.intersection.get(&key) {
            return r;
        }
        let (nf, ng) = (self.node(f), self.node(g));
        let r = if nf.var < ng.var {
            self.intersection(nf.lo, g)
        } else if nf.var > ng.var {
            self.intersection(f, ng.lo)
        } else {
            let lo = self.intersection(nf.lo, ng.lo);
            let hi = self.intersection(nf.hi, ng.hi);
            self.mk(nf.var, lo, hi)
        };
        self.caches.intersection.insert(key, r);
        r
    }

    pub fn difference(&mut self, f: NodeId, g: NodeId) -> NodeId {
        if f == NodeId::BOTTOM || f == g {
            return NodeId::BOTTOM;
        }
        if g == NodeId::BOTTOM {
            return f;
        }
        if let Some(&r) = self.caches.difference.get(&(f, g)) {
            return r;
        }
        let (nf, ng) = (self.node(f), self.node(g));
        let r = if nf.var < ng.var {
            let lo = self.difference(nf.lo, g);
            self.mk(nf.var, lo, nf.hi)
        } else if nf.var > ng.var {
            self.difference(f, ng.lo)
        } else {
            let lo = self.difference(nf.lo, ng.lo);
            let hi = self.difference(nf.hi, ng.hi);
            self.mk(nf.var, lo, hi)
        };
        self.caches.difference.insert((f, g), r);
        r
    }

    /// Cross product `{a ∪ b | a ∈ f, b ∈ g}`.
    pub fn join(&mut self, f: NodeId, g: NodeId) -> NodeId {
        if f == NodeId::BOTTOM || g == NodeId::BOTTOM {
            return NodeId::BOTTOM;
        }
        if f == NodeId::TOP {
            return g;
        }
        if g == NodeId::TOP {
            return f;
        }
        if self.exhausted {
            return NodeId::BOTTOM;
        }
        let key = ordered(f, g);
        if let Some(&r) = self.caches.join.get(&key) {
            return r;
        }
        let (f, g) = key;
        let (nf, ng) = (self.node(f), self.node(g));
        let r = if nf.var < ng.var {
            let lo = self.join(nf.lo, g);
            let hi = self.join(nf.hi, g);
            self.mk(nf.var, lo, hi)
        } else if nf.var > ng.var {
            let lo = self.join(f, ng.lo);
            let hi = self.join(f, ng.hi);
            self.mk(ng.var, lo, hi)
        } else {
            let lo = self.join(nf.lo, ng.lo);
            let hh = self.join(nf.hi, ng.hi);
            let hl = self.join(nf.hi, ng.lo);
            let lh = self.join(nf.lo, ng.hi);
            let mixed = self.union(hl, lh);
            let hi = self.union(hh, mixed);
            self.mk(nf.var, lo, hi)
        };
        self.caches.join.insert(key, r);
        r
    }

    /// Members containing (or avoiding) `v`.
    pub fn restrict(&mut self, f: NodeId, v: VarId, mode: RestrictMode) -> NodeId {
        let mut memo = FxHashMap::default();
        self.restrict_rec(f, v.0, mode, &mut memo)
    }

    fn restrict_rec(
        &mut self,
        f: NodeId,
        v: u32,
        mode: RestrictMode,
        memo: &mut FxHashMap<NodeId, NodeId>,
    ) -> NodeId {
        let n = self.node(f);
        if n.var > v {
            // v cannot occur below here (terminals included)
            return match mode {
                RestrictMode::Contains => NodeId::BOTTOM,
                RestrictMode::Excludes => f,
            };
        }
        if n.var == v {
            return match mode {
                RestrictMode::Contains => self.mk(v, NodeId::BOTTOM, n.hi),
                RestrictMode::Excludes => n.lo,
            };
        }
        if let Some(&r) = memo.get(&f) {
            return r;
        }
        let lo = self.restrict_rec(n.lo, v, mode, memo);
        let hi = self.restrict_rec(n.hi, v, mode, memo);
        let r = self.mk(n.var, lo, hi);
        memo.insert(f, r);
        r
    }

    /// Members containing every variable of `vars`.
    pub fn restrict_all(&mut self, f: NodeId, vars: &[VarId]) -> NodeId {
        let mut sorted: Vec<u32> = vars.iter().map(|v| v.0).collect();
        sorted.sort_unstable();
        sorted.dedup();
        let mut memo = FxHashMap::default();
        self.restrict_all_rec(f, &sorted, 0, &mut memo)
    }

    fn restrict_all_rec(
        &mut self,
        f: NodeId,
        vars: &[u32],
        k: usize,
        memo: &mut FxHashMap<(NodeId, usize), NodeId>,
    ) -> NodeId {
        if k == vars.len() || f == NodeId::BOTTOM {
            return f;
        }
        let n = self.node(f);
        let want = vars[k];
        if n.var > want {
            return NodeId::BOTTOM;
        }
        if let Some(&r) = memo.get(&(f, k)) {
            return r;
        }
        let r = if n.var == want {
            let hi = self.restrict_all_rec(n.hi, vars, k + 1, memo);
            self.mk(n.var, NodeId::BOTTOM, hi)
        } else {
            let lo = self.restrict_all_rec(n.lo, vars, k, memo);
            let hi = self.restrict_all_rec(n.hi, vars, k, memo);
            self.mk(n.var, lo, hi)
        };
        memo.insert((f, k), r);
        r
    }

    /// Members avoiding every variable of `vars`.
    pub fn exclude_all(&mut self, f: NodeId, vars: &[VarId]) -> NodeId {
        let mut sorted: Vec<u32> = vars.iter().map(|v| v.0).collect();
        sorted.sort_unstable();
        sorted.dedup();
        let mut memo = FxHashMap::default();
        self.exclude_all_rec(f, &sorted, &mut memo)
    }

    fn exclude_all_rec(&mut self, f: NodeId, vars: &[u32], memo: &mut FxHashMap<NodeId, NodeId>) -> NodeId {
        let n = self.node(f);
        let Some(&last) = vars.last() else { return f };
        if n.var > last {
            return f;
        }
        if let Some(&r) = memo.get(&f) {
            return r;
        }
        let lo = self.exclude_all_rec(n.lo, vars, memo);
        let r = if vars.binary_search(&n.var).is_ok() {
            lo
        } else {
            let hi = self.exclude_all_rec(n.hi, vars, memo);
            self.mk(n.var, lo, hi)
        };
        memo.insert(f, r);
        r
    }

    /// Members `S` with `|S ∩ group| <= k`.
    pub fn filter_at_most(&mut self, f: NodeId, group: &[VarId], k: usize) -> NodeId {
        let mut sorted: Vec<u32> = group.iter().map(|v| v.0).collect();
        sorted.sort_unstable();
        sorted.dedup();
        if k >= sorted.len() {
            return f;
        }
        let mut memo = FxHashMap::default();
        self.filter_rec(f, &sorted, k, 0, &mut memo)
    }

    fn filter_rec(
        &mut self,
        f: NodeId,
        group: &[u32],
        k: usize,
        used: usize,
        memo: &mut FxHashMap<(NodeId, usize), NodeId>,
    ) -> NodeId {
        let n = self.node(f);
        // terminals carry TERMINAL_VAR and fall out here as well
        if n.var > *group.last().expect("non-empty group") {
            return f;
        }
        if let Some(&r) = memo.get(&(f, used)) {
            return r;
        }
        if self.over_limit(memo.len()) {
            return NodeId::BOTTOM;
        }
        let lo = self.filter_rec(n.lo, group, k, used, memo);
        let r = if group.binary_search(&n.var).is_ok() {
            let hi = if used == k {
                NodeId::BOTTOM
            } else {
                self.filter_rec(n.hi, group, k, used + 1, memo)
            };
            self.mk(n.var, lo, hi)
        } else {
            let hi = self.filter_rec(n.hi, group, k, used, memo);
            self.mk(n.var, lo, hi)
        };
        memo.insert((f, used), r);
        r
    }

    /// Members satisfying every `|S ∩ group| <= k` at once. Equivalent to
    /// chaining [`Manager::filter_at_most`] but walks `f` once per batch of up
    /// to 32 groups.
    pub fn filter_groups(&mut self, f: NodeId, groups: &[(Vec<VarId>, usize)]) -> NodeId {
        self.join_filtered(f, NodeId::TOP, groups)
    }

    /// `filter_groups(join(f, g), groups)`. When every variable of `g` sits
    /// below every variable of `f` the join is fused into the filter pass.
    pub fn join_filtered(&mut self, f: NodeId, g: NodeId, groups: &[(Vec<VarId>, usize)]) -> NodeId {
        let mut live: Vec<(Vec<u32>, usize)> = Vec::new();
        for (vars, k) in groups {
            let mut sorted: Vec<u32> = vars.iter().map(|v| v.0).collect();
            sorted.sort_unstable();
            sorted.dedup();
            if *k < sorted.len() {
                live.push((sorted, *k));
            }
        }
        let stacked = g == NodeId::TOP || self.max_var(f).map_or(true, |v| v.0 < self.raw_var(g));
        let mut out = if stacked { f } else { self.join(f, g) };
        let mut tail = if stacked { g } else { NodeId::TOP };
        // 4-bit counters packed into a u128
        let (small, large): (Vec<_>, Vec<_>) = live.into_iter().partition(|g| g.1 < 15);
        for batch in small.chunks(32) {
            let plan = GroupFilter::new(batch);
            let mut memo = FxHashMap::default();
            out = self.filter_groups_rec(out, tail, &plan, 0, &mut memo);
            tail = NodeId::TOP;
        }
        if tail != NodeId::TOP {
            out = self.join(out, tail);
        }
        for (vars, k) in large {
            let ids: Vec<VarId> = vars.into_iter().map(VarId).collect();
            out = self.filter_at_most(out, &ids, k);
        }
        out
    }

    // `tail` stands in for TOP; its variables lie below those of `f`.
    fn filter_groups_rec(
        &mut self,
        f: NodeId,
        tail: NodeId,
        plan: &GroupFilter,
        state: u128,
        memo: &mut FxHashMap<(NodeId, u128), NodeId>,
    ) -> NodeId {
        if f == NodeId::TOP && tail != NodeId::TOP {
            return self.filter_groups_rec(tail, NodeId::TOP, plan, state, memo);
        }
        let n = self.node(f);
        if n.var > plan.max_last {
            return self.join(f, tail);
        }
        let state = state & plan.alive_bits(n.var);
        if let Some(&r) = memo.get(&(f, state)) {
            return r;
        }
        // the memo can outgrow the arena by far
        if self.over_limit(memo.len()) {
            return NodeId::BOTTOM;
        }
        let lo = self.filter_groups_rec(n.lo, tail, plan, state, memo);
        let hi = match plan.take(n.var, state) {
            Some(next) => self.filter_groups_rec(n.hi, tail, plan, next, memo),
            None => NodeId::BOTTOM,
        };
        let r = self.mk(n.var, lo, hi);
        memo.insert((f, state), r);
        r
    }

    /// Projection of every member onto the sorted variable list `keep`.
    pub fn project_onto(&mut self, f: NodeId, keep: &[VarId]) -> NodeId {
        let mut sorted: Vec<u32> = keep.iter().map(|v| v.0).collect();
        sorted.sort_unstable();
        sorted.dedup();
        let mut memo = FxHashMap::default();
        self.project_rec(f, &sorted, &mut memo)
    }

    fn project_rec(&mut self, f: NodeId, keep: &[u32], memo: &mut FxHashMap<NodeId, NodeId>) -> NodeId {
        if f.is_terminal() {
            return f;
        }
        let n = self.node(f);
        match keep.last() {
            Some(&last) if n.var <= last => {}
            // nothing kept can appear below; f is non-empty
            _ => return NodeId::TOP,
        }
        if let Some(&r) = memo.get(&f) {
            return r;
        }
        let lo = self.project_rec(n.lo, keep, memo);
        let hi = self.project_rec(n.hi, keep, memo);
        let r = if keep.binary_search(&n.var).is_ok() {
            self.mk(n.var, lo, hi)
        } else {
            self.union(lo, hi)
        };
        memo.insert(f, r);
        r
    }

    /// Removes every variable satisfying `drop` from every member.
    pub fn abstract_vars(&mut self, f: NodeId, drop: impl Fn(VarId) -> bool) -> NodeId {
        let mut memo = FxHashMap::default();
        self.abstract_rec(f, &drop, &mut memo)
    }

    fn abstract_rec(
        &mut self,
        f: NodeId,
        drop: &impl Fn(VarId) -> bool,
        memo: &mut FxHashMap<NodeId, NodeId>,
    ) -> NodeId {
        if f.is_terminal() {
            return f;
        }
        if let Some(&r) = memo.get(&f) {
            return r;
        }
        let n = self.node(f);
        let lo = self.abstract_rec(n.lo, drop, memo);
        let hi = self.abstract_rec(n.hi, drop, memo);
        let r = if drop(VarId(n.var)) {
            self.union(lo, hi)
        } else {
            self.mk(n.var, lo, hi)
        };
        memo.insert(f, r);
        r
    }

    /// Largest variable index appearing in `f`, if any.
    pub fn max_var(&self, f: NodeId) -> Option<VarId> {
        self.reachable_postorder(f)
            .into_iter()
            .filter_map(|id| {
                let v = self.raw_var(id);
                (v != TERMINAL_VAR).then_some(VarId(v))
            })
            .max()
    }

    /// Every variable appearing in some member of `f`, ascending.
    pub fn support(&self, f: NodeId) -> Vec<VarId> {
        let mut vars: Vec<VarId> = self
            .reachable_postorder(f)
            .into_iter()
            .filter(|id| !id.is_terminal())
            .map(|id| VarId(self.raw_var(id)))
            .collect();
        vars.sort_unstable();
        vars.dedup();
        vars
    }
}

struct GroupFilter {
    /// Variable to the bitmask of groups containing it, sorted by variable.
    membership: Vec<(u32, u32)>,
    /// Last variable of each group, ascending.
    lasts: Vec<u32>,
    /// `suffix[i]`: counter bits of the groups from `lasts[i]` on.
    suffix: Vec<u128>,
    bounds: Vec<u128>,
    max_last: u32,
}

impl GroupFilter {
    fn new(groups: &[(Vec<u32>, usize)]) -> Self {
        let mut by_var: FxHashMap<u32, u32> = FxHashMap::default();
        for (g, (vars, _)) in groups.iter().enumerate() {
            for &v in vars {
                *by_var.entry(v).or_default() |= 1 << g;
            }
        }
        let mut membership: Vec<(u32, u32)> = by_var.into_iter().collect();
        membership.sort_unstable();
        let mut lasts: Vec<(u32, usize)> = groups.iter().enumerate().map(|(g, (vars, _))| (*vars.last().expect("non-empty"), g)).collect();
        lasts.sort_unstable();
        let mut suffix = vec![0u128; lasts.len() + 1];
        for i in (0..lasts.len()).rev() {
            suffix[i] = suffix[i + 1] | 0xf << (4 * lasts[i].1);
        }
        GroupFilter {
            membership,
            max_last: lasts.last().map_or(0, |l| l.0),
            lasts: lasts.into_iter().map(|l| l.0).collect(),
            suffix,
            bounds: groups.iter().map(|g| g.1 as u128).collect(),
        }
    }

    /// Counter bits of the groups that still have variables at or below `var`.
    fn alive_bits(&self, var: u32) -> u128 {
        self.suffix[self.lasts.partition_point(|&l| l < var)]
    }

    /// State after taking `var`, or `None` if some group would overflow.
    fn take(&self, var: u32, state: u128) -> Option<u128> {
        let Ok(i) = self.membership.binary_search_by_key(&var, |m| m.0) else {
            return Some(state);
        };
        let mut mask = self.membership[i].1;
        let mut next = state;
        while mask != 0 {
            let g = mask.trailing_zeros() as usize;
            mask &= mask - 1;
            let count = (next >> (4 * g)) & 0xf;
            if count == self.bounds[g] {
                return None;
            }
            next += 1 << (4 * g);
        }
        Some(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(i: u32) -> VarId {
        VarId(i)
    }

    fn fam(m: &mut Manager, sets: &[&[u32]]) -> NodeId {
        let members: Vec<Vec<VarId>> = sets.iter().map(|s| s.iter().copied().map(VarId).collect()).collect();
        m.build_family(&members)
    }

    #[test]
    fn identities_and_annihilators() {
        let mut m = Manager::new();
        let f = fam(&mut m, &[&[1], &[2, 3]]);
        assert_eq!(m.union(f, NodeId::BOTTOM), f);
        assert_eq!(m.intersection(f, NodeId::BOTTOM), NodeId::BOTTOM);
        assert_eq!(m.difference(f, f), NodeId::BOTTOM);
        assert_eq!(m.join(f, NodeId::TOP), f);
        assert_eq!(m.join(f, NodeId::BOTTOM), NodeId::BOTTOM);
    }

    #[test]
    fn intersection_and_difference_small() {
        // a = 0, b = 1
        let mut m = Manager::new();
        let f = fam(&mut m, &[&[0], &[1]]);
        let g = fam(&mut m, &[&[1], &[0, 1]]);
        let inter = m.intersection(f, g);
        assert_eq!(inter, fam(&mut m, &[&[1]]));
        let diff = m.difference(f, g);
        assert_eq!(diff, fam(&mut m, &[&[0]]));
    }

    #[test]
    fn join_small() {
        let mut m = Manager::new();
        let f = fam(&mut m, &[&[1]]);
        let g = fam(&mut m, &[&[2], &[]]);
        let j = m.join(f, g);
        assert_eq!(j, fam(&mut m, &[&[1, 2], &[1]]));
    }

    #[test]
    fn restrict_modes() {
        let mut m = Manager::new();
        let f = fam(&mut m, &[&[0], &[0, 1], &[1]]);
        let with_a = m.restrict(f, v(0), RestrictMode::Contains);
        assert_eq!(with_a, fam(&mut m, &[&[0], &[0, 1]]));
        let without_a = m.restrict(f, v(0), RestrictMode::Excludes);
        assert_eq!(without_a, fam(&mut m, &[&[1]]));
        assert_eq!(m.restrict(NodeId::BOTTOM, v(0), RestrictMode::Contains), NodeId::BOTTOM);
    }

    #[test]
    fn filter_at_most_small() {
        let mut m = Manager::new();
        let f = fam(&mut m, &[&[0], &[1], &[0, 1]]);
        let r = m.filter_at_most(f, &[v(0), v(1)], 1);
        assert_eq!(r, fam(&mut m, &[&[0], &[1]]));
        assert_eq!(m.filter_at_most(f, &[v(0), v(1)], 2), f);
        let zero = m.filter_at_most(f, &[v(0), v(1)], 0);
        let by_hand = m.exclude_all(f, &[v(0), v(1)]);
        assert_eq!(zero, by_hand);
        assert_eq!(zero, NodeId::BOTTOM);
    }

    #[test]
    fn projection_and_abstraction() {
        let mut m = Manager::new();
        let f = fam(&mut m, &[&[0, 2], &[1, 2], &[1, 3]]);
        let p = m.project_onto(f, &[v(2), v(3)]);
        assert_eq!(p, fam(&mut m, &[&[2], &[3]]));
        let a = m.abstract_vars(f, |x| x.0 >= 2);
        assert_eq!(a, fam(&mut m, &[&[0], &[1]]));
    }

    #[test]
    fn restrict_all_requires_every_var() {
        let mut m = Manager::new();
        let f = fam(&mut m, &[&[0, 2], &[1, 2], &[0, 1, 2], &[0]]);
        let r = m.restrict_all(f, &[v(2), v(0)]);
        assert_eq!(r, fam(&mut m, &[&[0, 2], &[0, 1, 2]]));
        assert_eq!(m.restrict_all(f, &[]), f);
    }

    #[test]
    fn caches_can_be_cleared() {
        let mut m = Manager::new();
        let f = fam(&mut m, &[&[0], &[2]]);
        let g = fam(&mut m, &[&[1], &[]]);
        let j1 = m.join(f, g);
        m.clear_caches();
        let j2 = m.join(f, g);
        assert_eq!(j1, j2);
    }
}
