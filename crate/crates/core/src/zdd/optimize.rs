use std::hash::Hash;

use num_bigint::BigUint;
use num_traits::{One, Zero};
use rustc_hash::FxHashMap;

use super::{Manager, NodeId, VarId};

/// Additive objective over the variables of a member, evaluated root to leaf.
///
/// `State` lets a weight depend on which variables were taken earlier on the
/// path. Stateless objectives use `()`.
pub trait PathWeight {
    type State: Copy + Eq + Hash;

    fn start(&self) -> Self::State;

    /// Normalizes the state before a node labelled `var` is visited. Dropping
    /// information that can no longer matter below `var` keeps memo tables small.
    fn enter(&self, state: Self::State, _var: VarId) -> Self::State {
        state
    }

    /// Weight earned by taking `var`, and the state afterwards.
    fn take(&self, state: Self::State, var: VarId) -> (f64, Self::State);
}

/// Dense per-variable weights; variables past the end weigh 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightMap {
    values: Vec<f64>,
}

impl WeightMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_len(len: usize) -> Self {
        WeightMap { values: vec![0.0; len] }
    }

    #[inline]
    pub fn get(&self, v: VarId) -> f64 {
        self.values.get(v.index()).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, v: VarId, w: f64) {
        if v.index() >= self.values.len() {
            self.values.resize(v.index() + 1, 0.0);
        }
        self.values[v.index()] = w;
    }

    pub fn add(&mut self, v: VarId, w: f64) {
        let cur = self.get(v);
        self.set(v, cur + w);
    }

    /// Overwrites entries with the non-zero entries of `other`.
    pub fn overlay(&mut self, other: &WeightMap) {
        for (i, &w) in other.values.iter().enumerate() {
            if w != 0.0 {
                self.set(VarId(i as u32), w);
            }
        }
    }

    /// Sum over `member` folded from the last variable to the first, the same
    /// association the diagram dynamic programs use.
    pub fn member_weight(&self, member: &[VarId]) -> f64 {
        let mut sorted = member.to_vec();
        sorted.sort_unstable();
        sorted.iter().rev().fold(0.0, |acc, &v| self.get(v) + acc)
    }
}

impl PathWeight for WeightMap {
    type State = ();

    fn start(&self) {}

    #[inline]
    fn take(&self, _state: (), var: VarId) -> (f64, ()) {
        (self.get(var), ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedMember {
    pub weight: f64,
    pub vars: Vec<VarId>,
}

/// Maximum-weight queries against one frozen weighting.
///
/// The unconstrained sub-results are memoized across queries, so repeated
/// calls with different required-variable sets share work below the last
/// required variable. Ties prefer the branch without the variable.
/// Node ids are immutable, so the memo stays valid while the manager grows;
/// the manager is passed per call for that reason.
pub struct MaxWeightOracle<'w, W: PathWeight> {
    weight: &'w W,
    plain: FxHashMap<(NodeId, W::State), f64>,
}

impl<'w, W: PathWeight> MaxWeightOracle<'w, W> {
    pub fn new(weight: &'w W) -> Self {
        MaxWeightOracle {
            weight,
            plain: FxHashMap::default(),
        }
    }

    pub fn best(&mut self, mgr: &Manager, f: NodeId) -> Option<f64> {
        self.best_containing(mgr, f, &[])
    }

    pub fn best_member(&mut self, mgr: &Manager, f: NodeId) -> Option<WeightedMember> {
        self.best_member_containing(mgr, f, &[])
    }

    /// Best weight among members containing every variable of `required`.
    pub fn best_containing(&mut self, mgr: &Manager, f: NodeId, required: &[VarId]) -> Option<f64> {
        let req = sorted_raw(required);
        let mut memo = FxHashMap::default();
        let start = self.weight.start();
        let val = self.value(mgr, f, start, &req, 0, &mut memo);
        (val != f64::NEG_INFINITY).then_some(val)
    }

    pub fn best_member_containing(&mut self, mgr: &Manager, f: NodeId, required: &[VarId]) -> Option<WeightedMember> {
        let req = sorted_raw(required);
        let mut memo = FxHashMap::default();
        let mut state = self.weight.start();
        let total = self.value(mgr, f, state, &req, 0, &mut memo);
        if total == f64::NEG_INFINITY {
            return None;
        }
        let mut vars = Vec::new();
        let mut cur = f;
        let mut k = 0;
        while cur != NodeId::TOP {
            let n = mgr.node(cur);
            state = self.weight.enter(state, VarId(n.var));
            let must_take = k < req.len() && req[k] == n.var;
            let (w, next_state) = self.weight.take(state, VarId(n.var));
            let next_k = if must_take { k + 1 } else { k };
            let take_hi = must_take || {
                let lo_val = self.value(mgr, n.lo, state, &req, k, &mut memo);
                let hi_val = w + self.value(mgr, n.hi, next_state, &req, next_k, &mut memo);
                hi_val > lo_val
            };
            if take_hi {
                vars.push(VarId(n.var));
                cur = n.hi;
                state = next_state;
                k = next_k;
            } else {
                cur = n.lo;
            }
        }
        Some(WeightedMember { weight: total, vars })
    }

    fn value(
        &mut self,
        mgr: &Manager,
        f: NodeId,
        state: W::State,
        req: &[u32],
        k: usize,
        memo: &mut FxHashMap<(NodeId, W::State, usize), f64>,
    ) -> f64 {
        if f == NodeId::BOTTOM {
            return f64::NEG_INFINITY;
        }
        if f == NodeId::TOP {
            return if k == req.len() { 0.0 } else { f64::NEG_INFINITY };
        }
        let n = mgr.node(f);
        let state = self.weight.enter(state, VarId(n.var));
        if k == req.len() {
            if let Some(&v) = self.plain.get(&(f, state)) {
                return v;
            }
        } else {
            if n.var > req[k] {
                return f64::NEG_INFINITY;
            }
            if let Some(&v) = memo.get(&(f, state, k)) {
                return v;
            }
        }
        let (w, next_state) = self.weight.take(state, VarId(n.var));
        let val = if k < req.len() && n.var == req[k] {
            w + self.value(mgr, n.hi, next_state, req, k + 1, memo)
        } else {
            let lo_val = self.value(mgr, n.lo, state, req, k, memo);
            let hi_val = w + self.value(mgr, n.hi, next_state, req, k, memo);
            if hi_val > lo_val {
                hi_val
            } else {
                lo_val
            }
        };
        if k == req.len() {
            self.plain.insert((f, state), val);
        } else {
            memo.insert((f, state, k), val);
        }
        val
    }
}

fn sorted_raw(vars: &[VarId]) -> Vec<u32> {
    let mut v: Vec<u32> = vars.iter().map(|v| v.0).collect();
    v.sort_unstable();
    v.dedup();
    v
}

#[derive(Clone, Copy, Debug)]
enum Pick {
    Done,
    Lo(u32),
    Hi(u32),
}

impl Manager {
    /// Exact number of members.
    pub fn count(&self, f: NodeId) -> BigUint {
        let mut memo: FxHashMap<NodeId, BigUint> = FxHashMap::default();
        self.count_rec(f, &mut memo)
    }

    fn count_rec(&self, f: NodeId, memo: &mut FxHashMap<NodeId, BigUint>) -> BigUint {
        if f == NodeId::BOTTOM {
            return BigUint::zero();
        }
        if f == NodeId::TOP {
            return BigUint::one();
        }
        if let Some(c) = memo.get(&f) {
            return c.clone();
        }
        let n = self.node(f);
        let c = self.count_rec(n.lo, memo) + self.count_rec(n.hi, memo);
        memo.insert(f, c.clone());
        c
    }

    pub fn max_weight_member<W: PathWeight>(&self, f: NodeId, w: &W) -> Option<WeightedMember> {
        MaxWeightOracle::new(w).best_member(self, f)
    }

    /// The `k` heaviest members, heaviest first; equal weights keep canonical order.
    pub fn top_k_members(&self, f: NodeId, w: &WeightMap, k: usize) -> Vec<WeightedMember> {
        assert!(k >= 1, "top_k_members needs k >= 1");
        let mut memo: FxHashMap<NodeId, Vec<(f64, Pick)>> = FxHashMap::default();
        self.kbest_rec(f, w, k, &mut memo);
        let Some(list) = memo.get(&f).cloned().or_else(|| (f == NodeId::TOP).then(|| vec![(0.0, Pick::Done)]))
        else {
            return Vec::new();
        };
        (0..list.len())
            .map(|rank| {
                let mut vars = Vec::new();
                let mut cur = f;
                let mut r = rank;
                while cur != NodeId::TOP {
                    let n = self.node(cur);
                    match memo[&cur][r].1 {
                        Pick::Lo(next) => {
                            cur = n.lo;
                            r = next as usize;
                        }
                        Pick::Hi(next) => {
                            vars.push(VarId(n.var));
                            cur = n.hi;
                            r = next as usize;
                        }
                        Pick::Done => unreachable!("only TOP is done"),
                    }
                }
                WeightedMember {
                    weight: list[rank].0,
                    vars,
                }
            })
            .collect()
    }

    fn kbest_rec(
        &self,
        f: NodeId,
        w: &WeightMap,
        k: usize,
        memo: &mut FxHashMap<NodeId, Vec<(f64, Pick)>>,
    ) -> Vec<f64> {
        if f == NodeId::BOTTOM {
            return Vec::new();
        }
        if f == NodeId::TOP {
            return vec![0.0];
        }
        if let Some(list) = memo.get(&f) {
            return list.iter().map(|e| e.0).collect();
        }
        let n = self.node(f);
        let lo = self.kbest_rec(n.lo, w, k, memo);
        let wv = w.get(VarId(n.var));
        let hi: Vec<f64> = self.kbest_rec(n.hi, w, k, memo).into_iter().map(|x| wv + x).collect();
        let mut merged = Vec::with_capacity(k.min(lo.len() + hi.len()));
        let (mut i, mut j) = (0, 0);
        while merged.len() < k && (i < lo.len() || j < hi.len()) {
            let take_hi = match (lo.get(i), hi.get(j)) {
                (Some(&a), Some(&b)) => b > a,
                (None, Some(_)) => true,
                _ => false,
            };
            if take_hi {
                merged.push((hi[j], Pick::Hi(j as u32)));
                j += 1;
            } else {
                merged.push((lo[i], Pick::Lo(i as u32)));
                i += 1;
            }
        }
        let values = merged.iter().map(|e| e.0).collect();
        memo.insert(f, merged);
        values
    }
}
