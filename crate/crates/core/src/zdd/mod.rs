//! Zero-suppressed decision diagrams over a totally ordered variable universe.
//!
//! A [`Manager`] owns an append-only node arena together with the unique
//! table that keeps every diagram canonical: two families are equal exactly
//! when their root [`NodeId`]s are equal. Nodes are freed only by
//! [`Manager::compact`], which renumbers the survivors.
//!
//! Set algebra (union, intersection, difference), the cross-product
//! [`Manager::join`], cofactoring and cardinality filtering live in
//! `algebra`; counting and weighted optimization live in `optimize`.

mod algebra;
mod optimize;

use std::fmt;
use std::io::{self, Write};

use rustc_hash::FxHashMap;

pub use algebra::{RestrictMode, SetOp};
pub use optimize::{MaxWeightOracle, PathWeight, WeightMap, WeightedMember};

/// A decision variable. Smaller indices sit closer to the root.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub u32);

impl VarId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x{}", self.0)
    }
}

/// Handle into a manager's node arena.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(u32);

impl NodeId {
    /// The empty family.
    pub const BOTTOM: NodeId = NodeId(0);
    /// The family containing only the empty set.
    pub const TOP: NodeId = NodeId(1);

    pub fn is_terminal(self) -> bool {
        self.0 < 2
    }

    pub fn raw(self) -> u32 {
        self.0
    }
}

/// Variable label used for both terminals; orders after every real variable.
const TERMINAL_VAR: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub(crate) struct Node {
    pub(crate) var: u32,
    pub(crate) lo: NodeId,
    pub(crate) hi: NodeId,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ZddError {
    #[error("variable {var} must precede the root variables of both children (lo root {lo_var:?}, hi root {hi_var:?})")]
    OrderViolation {
        var: VarId,
        lo_var: Option<VarId>,
        hi_var: Option<VarId>,
    },
    #[error("node {0:?} does not belong to this manager")]
    UnknownNode(NodeId),
}

/// Owner of all diagram nodes. Single writer; see the crate README for the
/// concurrency contract.
pub struct Manager {
    nodes: Vec<Node>,
    unique: FxHashMap<Node, NodeId>,
    pub(crate) caches: algebra::Caches,
    limit: usize,
    pub(crate) exhausted: bool,
}

impl Default for Manager {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Manager {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Manager")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

impl Manager {
    pub fn new() -> Self {
        let terminal = |id| Node {
            var: TERMINAL_VAR,
            lo: NodeId(id),
            hi: NodeId(id),
        };
        Manager {
            nodes: vec![terminal(0), terminal(1)],
            unique: FxHashMap::default(),
            caches: algebra::Caches::default(),
            limit: usize::MAX,
            exhausted: false,
        }
    }

    /// Runs `op` with the arena capped at `limit` nodes. Returns `None` if the
    /// cap was hit; nodes built so far stay valid but the caches are dropped.
    pub fn with_node_limit<T>(&mut self, limit: usize, op: impl FnOnce(&mut Self) -> T) -> Option<T> {
        let saved = std::mem::replace(&mut self.limit, limit);
        let out = op(self);
        self.limit = saved;
        if std::mem::take(&mut self.exhausted) {
            self.clear_caches();
            None
        } else {
            Some(out)
        }
    }

    /// Whether an operation hit the node cap, in which case its result is meaningless.
    #[inline]
    pub(crate) fn over_limit(&mut self, extra: usize) -> bool {
        if self.nodes.len() + extra >= self.limit {
            self.exhausted = true;
        }
        self.exhausted
    }

    /// Number of nodes in the arena, terminals included.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every operation memo. Results of later operations are unchanged.
    pub fn clear_caches(&mut self) {
        self.caches = algebra::Caches::default();
    }

    #[inline]
    pub(crate) fn node(&self, id: NodeId) -> Node {
        self.nodes[id.0 as usize]
    }

    #[inline]
    pub(crate) fn raw_var(&self, id: NodeId) -> u32 {
        self.nodes[id.0 as usize].var
    }

    /// Root variable of `f`, or `None` for a terminal.
    pub fn var_of(&self, f: NodeId) -> Option<VarId> {
        let v = self.raw_var(f);
        (v != TERMINAL_VAR).then_some(VarId(v))
    }

    pub fn lo(&self, f: NodeId) -> NodeId {
        self.node(f).lo
    }

    pub fn hi(&self, f: NodeId) -> NodeId {
        self.node(f).hi
    }

    pub fn contains_node(&self, f: NodeId) -> bool {
        (f.0 as usize) < self.nodes.len()
    }

    /// Checked node constructor applying the zero-suppression rule.
    pub fn make_node(&mut self, var: VarId, lo: NodeId, hi: NodeId) -> Result<NodeId, ZddError> {
        for id in [lo, hi] {
            if !self.contains_node(id) {
                return Err(ZddError::UnknownNode(id));
            }
        }
        if var.0 >= self.raw_var(lo) || var.0 >= self.raw_var(hi) {
            return Err(ZddError::OrderViolation {
                var,
                lo_var: self.var_of(lo),
                hi_var: self.var_of(hi),
            });
        }
        Ok(self.mk(var.0, lo, hi))
    }

    /// Unchecked constructor used by the operations, which uphold ordering.
    #[inline]
    pub(crate) fn mk(&mut self, var: u32, lo: NodeId, hi: NodeId) -> NodeId {
        if hi == NodeId::BOTTOM {
            return lo;
        }
        debug_assert!(var < self.raw_var(lo) && var < self.raw_var(hi));
        let node = Node { var, lo, hi };
        if let Some(&id) = self.unique.get(&node) {
            return id;
        }
        if self.over_limit(0) {
            return NodeId::BOTTOM;
        }
        let id = NodeId(u32::try_from(self.nodes.len()).expect("node arena exceeds u32 range"));
        self.nodes.push(node);
        self.unique.insert(node, id);
        id
    }

    /// The family `{{v}}`.
    pub fn singleton(&mut self, v: VarId) -> NodeId {
        self.mk(v.0, NodeId::BOTTOM, NodeId::TOP)
    }

    /// The family holding exactly one member, `vars` (any order).
    pub fn single_member(&mut self, vars: &[VarId]) -> NodeId {
        let mut sorted: Vec<VarId> = vars.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        sorted
            .iter()
            .rev()
            .fold(NodeId::TOP, |acc, v| self.mk(v.0, NodeId::BOTTOM, acc))
    }

    /// Canonical diagram for an explicit family of sets.
    pub fn build_family(&mut self, members: &[Vec<VarId>]) -> NodeId {
        let mut sorted: Vec<Vec<VarId>> = members
            .iter()
            .map(|m| {
                let mut m = m.clone();
                m.sort_unstable();
                m.dedup();
                m
            })
            .collect();
        sorted.sort();
        sorted.dedup();
        self.build_sorted(&sorted, 0)
    }

    // `members` sorted and deduplicated; every member's prefix before `depth` is
    // shared and already consumed.
    fn build_sorted(&mut self, members: &[Vec<VarId>], depth: usize) -> NodeId {
        if members.is_empty() {
            return NodeId::BOTTOM;
        }
        // the member that ends here (if any) sorts first
        let (has_empty, rest) = if members[0].len() == depth {
            (true, &members[1..])
        } else {
            (false, members)
        };
        if rest.is_empty() {
            return if has_empty { NodeId::TOP } else { NodeId::BOTTOM };
        }
        let v = rest.iter().map(|m| m[depth]).min().expect("non-empty");
        // members whose next element is `v` form the hi branch; the rest keep
        // their next element > v and stay on the lo branch at the same depth.
        let mut with_v = Vec::new();
        let mut without_v = Vec::new();
        for m in rest {
            if m[depth] == v {
                with_v.push(m.clone());
            } else {
                without_v.push(m.clone());
            }
        }
        let hi = self.build_sorted(&with_v, depth + 1);
        let mut lo = self.build_relative(&without_v, depth);
        if has_empty {
            lo = self.union(lo, NodeId::TOP);
        }
        self.mk(v.0, lo, hi)
    }

    fn build_relative(&mut self, members: &[Vec<VarId>], depth: usize) -> NodeId {
        let tails: Vec<Vec<VarId>> = members.iter().map(|m| m[depth..].to_vec()).collect();
        self.build_sorted(&tails, 0)
    }

    /// Members in canonical order (lexicographic, absent before present at each
    /// variable), truncated to `limit`.
    pub fn enumerate_members(&self, f: NodeId, limit: usize) -> Vec<Vec<VarId>> {
        let mut out = Vec::new();
        let mut path = Vec::new();
        self.enumerate_rec(f, limit, &mut path, &mut out);
        out
    }

    fn enumerate_rec(&self, f: NodeId, limit: usize, path: &mut Vec<VarId>, out: &mut Vec<Vec<VarId>>) {
        if out.len() >= limit || f == NodeId::BOTTOM {
            return;
        }
        if f == NodeId::TOP {
            out.push(path.clone());
            return;
        }
        let n = self.node(f);
        self.enumerate_rec(n.lo, limit, path, out);
        path.push(VarId(n.var));
        self.enumerate_rec(n.hi, limit, path, out);
        path.pop();
    }

    /// Whether `member` (any order) belongs to `f`.
    pub fn contains_member(&self, f: NodeId, member: &[VarId]) -> bool {
        let mut sorted = member.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut cur = f;
        let mut k = 0;
        loop {
            if cur == NodeId::BOTTOM {
                return false;
            }
            if cur == NodeId::TOP {
                return k == sorted.len();
            }
            let n = self.node(cur);
            match sorted.get(k) {
                Some(v) if v.0 == n.var => {
                    cur = n.hi;
                    k += 1;
                }
                Some(v) if v.0 < n.var => return false,
                _ => cur = n.lo,
            }
        }
    }

    /// Drops every node not reachable from `roots` and renumbers the rest.
    /// Returns the new ids of `roots` in order; any other id held by the
    /// caller is invalid afterwards. Operation memos are cleared.
    pub fn compact(&mut self, roots: &[NodeId]) -> Vec<NodeId> {
        let mut live = vec![false; self.nodes.len()];
        live[0] = true;
        live[1] = true;
        let mut stack: Vec<NodeId> = roots.to_vec();
        while let Some(id) = stack.pop() {
            if live[id.0 as usize] {
                continue;
            }
            live[id.0 as usize] = true;
            let n = self.node(id);
            stack.push(n.lo);
            stack.push(n.hi);
        }
        // children always precede parents in the arena, so one sweep suffices
        let mut remap = vec![NodeId::BOTTOM; self.nodes.len()];
        let mut nodes = Vec::with_capacity(live.iter().filter(|&&l| l).count());
        let mut unique = FxHashMap::default();
        for (old, node) in self.nodes.iter().enumerate() {
            if !live[old] {
                continue;
            }
            let id = NodeId(nodes.len() as u32);
            remap[old] = id;
            let node = if old < 2 {
                *node
            } else {
                let n = Node {
                    var: node.var,
                    lo: remap[node.lo.0 as usize],
                    hi: remap[node.hi.0 as usize],
                };
                unique.insert(n, id);
                n
            };
            nodes.push(node);
        }
        self.nodes = nodes;
        self.unique = unique;
        self.clear_caches();
        roots.iter().map(|r| remap[r.0 as usize]).collect()
    }

    /// Nodes reachable from `f`, children before parents.
    pub fn reachable_postorder(&self, f: NodeId) -> Vec<NodeId> {
        let mut seen = rustc_hash::FxHashSet::default();
        let mut order = Vec::new();
        let mut stack = vec![(f, false)];
        while let Some((id, expanded)) = stack.pop() {
            if expanded {
                order.push(id);
                continue;
            }
            if !seen.insert(id) {
                continue;
            }
            stack.push((id, true));
            if !id.is_terminal() {
                let n = self.node(id);
                stack.push((n.hi, false));
                stack.push((n.lo, false));
            }
        }
        order
    }

    /// Number of distinct non-terminal nodes reachable from `f`.
    pub fn size(&self, f: NodeId) -> usize {
        self.reachable_postorder(f)
            .into_iter()
            .filter(|id| !id.is_terminal())
            .count()
    }

    /// Writes one line per node as `id var lo hi`, children first; terminals
    /// print as `B` and `T`.
    pub fn dump<W: Write>(&self, f: NodeId, mut out: W) -> io::Result<()> {
        let label = |id: NodeId| match id {
            NodeId::BOTTOM => "B".to_string(),
            NodeId::TOP => "T".to_string(),
            other => other.0.to_string(),
        };
        for id in self.reachable_postorder(f) {
            if id.is_terminal() {
                continue;
            }
            let n = self.node(id);
            writeln!(out, "{} {} {} {}", id.0, n.var, label(n.lo), label(n.hi))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(i: u32) -> VarId {
        VarId(i)
    }

    #[test]
    fn zero_suppression_returns_lo() {
        let mut m = Manager::new();
        let x = m.singleton(v(5));
        assert_eq!(m.make_node(v(1), x, NodeId::BOTTOM).unwrap(), x);
    }

    #[test]
    fn base_node_is_unique() {
        let mut m = Manager::new();
        let a = m.make_node(v(3), NodeId::BOTTOM, NodeId::TOP).unwrap();
        let b = m.make_node(v(3), NodeId::BOTTOM, NodeId::TOP).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.enumerate_members(a, 10), vec![vec![v(3)]]);
    }

    #[test]
    fn ordering_violation_is_rejected() {
        let mut m = Manager::new();
        let x = m.singleton(v(2));
        let err = m.make_node(v(2), NodeId::BOTTOM, x).unwrap_err();
        assert!(matches!(err, ZddError::OrderViolation { .. }));
        assert!(m.make_node(v(7), NodeId::BOTTOM, x).is_err());
        assert!(m.make_node(v(0), NodeId(999), NodeId::TOP).is_err());
    }

    #[test]
    fn build_family_terminals() {
        let mut m = Manager::new();
        assert_eq!(m.build_family(&[]), NodeId::BOTTOM);
        assert_eq!(m.build_family(&[vec![]]), NodeId::TOP);
        let f = m.build_family(&[vec![v(1)], vec![v(2)]]);
        assert_eq!(m.count(f), 2u32.into());
    }

    #[test]
    fn enumerate_top_and_limit() {
        let mut m = Manager::new();
        assert_eq!(m.enumerate_members(NodeId::TOP, 10), vec![Vec::<VarId>::new()]);
        let f = m.build_family(&[vec![v(1)], vec![v(2)], vec![]]);
        let all = m.enumerate_members(f, 10);
        assert_eq!(all, vec![vec![], vec![v(2)], vec![v(1)]]);
        assert_eq!(m.enumerate_members(f, 1), vec![Vec::<VarId>::new()]);
    }

    #[test]
    fn dump_lists_children_first() {
        let mut m = Manager::new();
        let f = m.build_family(&[vec![v(0), v(1)], vec![v(1)]]);
        let mut buf = Vec::new();
        m.dump(f, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].ends_with(" 1 B T"));
        assert!(lines[1].contains(" 0 "));
    }

    #[test]
    fn contains_member_walks_path() {
        let mut m = Manager::new();
        let f = m.build_family(&[vec![v(0), v(3)], vec![v(2)]]);
        assert!(m.contains_member(f, &[v(3), v(0)]));
        assert!(m.contains_member(f, &[v(2)]));
        assert!(!m.contains_member(f, &[v(0)]));
        assert!(!m.contains_member(f, &[]));
    }
}
