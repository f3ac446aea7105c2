use num_bigint::BigUint;

use std::collections::BTreeMap;

use rustc_hash::FxHashMap;

use super::{AllocationTrace, CapacityBook, EventKind, Instance, MechanismError, TraceEvent};
use crate::agents::{enumerate_plans, enumerate_plans_with_change, TypeChange};
use crate::network::{flow_incidence, ActionKind, SpaceTimeNetwork, VarOrder, VarUniverse};
use crate::zdd::{Manager, NodeId, PathWeight, VarId, WeightedMember};

/// Undiscounted true rewards of a joint member, where a flagged agent's
/// values switch to the changed ones after its first trigger stay.
///
/// Under agent-major order the state holds only the current agent (tagged)
/// and whether its change fired. Under time-major order it is a bitmask over
/// the flagged agents, which caps their number at 64.
pub struct DynamicWeights<'a> {
    inst: &'a Instance,
    universe: VarUniverse,
    /// Bit index of each agent's change, if flagged.
    flag: Vec<Option<(u32, &'a TypeChange)>>,
}

impl<'a> DynamicWeights<'a> {
    pub fn new(inst: &'a Instance, universe: VarUniverse) -> Result<Self, MechanismError> {
        if universe.order() == VarOrder::TimeMajor && inst.changes.len() > 64 {
            return Err(MechanismError::Config(format!(
                "{} type changes exceed the 64 tracked under time-major order",
                inst.changes.len()
            )));
        }
        let mut flag = vec![None; inst.agents.len()];
        for (k, c) in inst.changes.iter().enumerate() {
            flag[c.agent as usize] = Some((k as u32, c));
        }
        Ok(DynamicWeights { inst, universe, flag })
    }

    fn fired(&self, state: u64, agent: u32) -> bool {
        match (self.universe.order(), self.flag[agent as usize]) {
            (_, None) => false,
            (VarOrder::AgentMajor, Some(_)) => state & 1 == 1,
            (VarOrder::TimeMajor, Some((k, _))) => state >> k & 1 == 1,
        }
    }

    fn fire(&self, state: u64, agent: u32) -> u64 {
        match (self.universe.order(), self.flag[agent as usize]) {
            (_, None) => state,
            (VarOrder::AgentMajor, Some(_)) => state | 1,
            (VarOrder::TimeMajor, Some((k, _))) => state | 1 << k,
        }
    }
}

impl PathWeight for DynamicWeights<'_> {
    type State = u64;

    fn start(&self) -> u64 {
        0
    }

    fn enter(&self, state: u64, var: VarId) -> u64 {
        if self.universe.order() != VarOrder::AgentMajor {
            return state;
        }
        let tag = (self.universe.agent_of(var) as u64 + 1) << 1;
        if state & !1 == tag {
            state
        } else {
            tag
        }
    }

    fn take(&self, state: u64, var: VarId) -> (f64, u64) {
        let a = self.universe.decode(var);
        let ActionKind::Stay(n) = a.kind else { return (0.0, state) };
        let spec = &self.inst.agents[a.agent as usize];
        let fired = self.fired(state, a.agent);
        let value = if !self.inst.net.is_active(n, a.time) {
            0.0
        } else if fired {
            self.flag[a.agent as usize].map_or(0.0, |(_, c)| c.new_rewards.value(n))
        } else {
            spec.rewards.value(n)
        };
        let next = match self.flag[a.agent as usize] {
            Some((_, c)) if !fired && c.triggers_on(&a) => self.fire(state, a.agent),
            _ => state,
        };
        (value, next)
    }
}

/// Best joint allocation with full knowledge of every agent and every type
/// change in advance, with a count of the joint plans searched.
///
/// Without type changes the count is that of the full capacity-filtered joint
/// family. With them every agent's plans are first reduced to those no other
/// plan beats with a subset of its edge slots, and the reduced joint family is
/// maximized directly while it stays small; the count is then of that reduced
/// family. Otherwise see [`offline_by_search`].
pub fn offline_optimal(inst: &Instance, order: VarOrder) -> Result<(AllocationTrace, BigUint), MechanismError> {
    solve(inst, order, !inst.changes.is_empty())
}

/// Same optimum found without the reduced joint family: agents without a
/// change are joined into one capacity-filtered family, and the agents with a
/// change, which make that family explode, are searched by branch and bound on
/// top of it. The count covers only the agents without a change.
pub fn offline_by_search(inst: &Instance, order: VarOrder) -> Result<(AllocationTrace, BigUint), MechanismError> {
    solve(inst, order, false)
}

fn solve(inst: &Instance, order: VarOrder, try_direct: bool) -> Result<(AllocationTrace, BigUint), MechanismError> {
    let net = &inst.net;
    let universe = VarUniverse::new(net, inst.agents.len(), order);
    let weights = DynamicWeights::new(inst, universe.clone())?;
    let direct = if try_direct {
        let mut mgr = Manager::new();
        mgr.with_node_limit(DIRECT_LIMIT, |mgr| {
            let mut book = CapacityBook::new();
            let mut z = NodeId::TOP;
            for spec in &inst.agents {
                let fam = match inst.change_for(spec.id) {
                    Some(c) => enumerate_plans_with_change(net, &universe, spec, c, mgr),
                    None => enumerate_plans(net, &universe, spec, mgr),
                };
                let plans = explicit_plans(mgr, fam.root, &universe, &weights);
                let kept: Vec<Vec<VarId>> = undominated(plans).into_iter().map(|p| p.vars).collect();
                let root = mgr.build_family(&kept);
                z = book.join_agent(mgr, net, &universe, z, spec.id, root);
            }
            z
        })
        .map(|z| (mgr.max_weight_member(z, &weights).map(|m| m.vars), mgr.count(z)))
    } else {
        None
    };
    let (best, count) = match direct {
        Some(found) => found,
        None => searched(inst, &universe, &weights),
    };
    let mut vars = best.ok_or_else(|| MechanismError::InvariantViolation {
        epoch: 0,
        detail: "joint family is empty".into(),
    })?;
    vars.sort_unstable();
    let best = WeightedMember { weight: 0.0, vars };

    let mut trace = AllocationTrace::new(net.horizon());
    let mut actions: Vec<_> = best.vars.iter().map(|&v| universe.decode(v)).collect();
    actions.sort_by_key(|a| (a.time, a.agent));
    for a in actions {
        let spec = &inst.agents[a.agent as usize];
        if a.time == spec.t_b {
            trace.events.push(TraceEvent {
                epoch: a.time,
                agent: a.agent,
                kind: if a.kind == ActionKind::Cancel {
                    EventKind::Rejected
                } else {
                    EventKind::Accepted
                },
            });
        }
        trace.actions[a.time as usize].push(a);
    }
    for c in &inst.changes {
        let spec = &inst.agents[c.agent as usize];
        if let Some(t) = super::trigger_epoch(&trace, c) {
            if t + 1 < spec.t_e {
                trace.events.push(TraceEvent {
                    epoch: t + 1,
                    agent: c.agent,
                    kind: EventKind::TypeChangeAccepted,
                });
            }
        }
    }
    trace.events.sort_by_key(|e| (e.epoch, e.agent));
    Ok((trace, count))
}

fn searched(inst: &Instance, universe: &VarUniverse, weights: &DynamicWeights) -> (Option<Vec<VarId>>, BigUint) {
    let net = &inst.net;
    let mut mgr = Manager::new();
    let mut book = CapacityBook::new();
    let mut z = NodeId::TOP;
    let mut changing = Vec::new();
    for spec in &inst.agents {
        match inst.change_for(spec.id) {
            Some(c) => {
                let fam = enumerate_plans_with_change(net, universe, spec, c, &mut mgr);
                changing.push(undominated(explicit_plans(&mgr, fam.root, universe, weights)));
            }
            None => {
                let fam = enumerate_plans(net, universe, spec, &mut mgr);
                z = book.join_agent(&mut mgr, net, universe, z, spec.id, fam.root);
            }
        }
    }
    let count = mgr.count(z);
    let z = mgr.compact(&[z])[0];
    let mut search = ChangeSearch {
        net,
        universe,
        weights,
        mgr,
        book: &book,
        z,
        plans: &changing,
        used: BTreeMap::new(),
        chosen: Vec::new(),
        memo: FxHashMap::default(),
        best: None,
        prices: FxHashMap::default(),
    };
    search.descend(0, 0.0);
    (search.best.map(|(_, vars)| vars), count)
}

fn explicit_plans(mgr: &Manager, family: NodeId, universe: &VarUniverse, weights: &DynamicWeights) -> Vec<ExplicitPlan> {
    mgr.enumerate_members(family, usize::MAX)
        .into_iter()
        .map(|vars| ExplicitPlan::new(vars, universe, weights))
        .collect()
}

struct ExplicitPlan {
    vars: Vec<VarId>,
    value: f64,
    slots: Vec<(usize, u32)>,
}

impl ExplicitPlan {
    fn new(vars: Vec<VarId>, universe: &VarUniverse, w: &DynamicWeights) -> Self {
        let mut state = w.start();
        let mut value = 0.0;
        let mut slots = Vec::new();
        for &v in &vars {
            state = w.enter(state, v);
            let (x, next) = w.take(state, v);
            value += x;
            state = next;
            if let Some(slot) = flow_incidence(&universe.decode(v)) {
                slots.push(slot);
            }
        }
        slots.sort_unstable();
        ExplicitPlan { vars, value, slots }
    }
}

/// Drops every plan that some other plan matches or beats in value while
/// using only a subset of its edge slots. Survivors come by decreasing value.
fn undominated(mut plans: Vec<ExplicitPlan>) -> Vec<ExplicitPlan> {
    plans.sort_by(|a, b| b.value.total_cmp(&a.value).then(a.slots.len().cmp(&b.slots.len())));
    let mut kept: Vec<ExplicitPlan> = Vec::new();
    for p in plans {
        if !kept.iter().any(|k| k.slots.iter().all(|s| p.slots.binary_search(s).is_ok())) {
            kept.push(p);
        }
    }
    kept
}

/// Depth-first search over the explicit plans of the changing agents. Each
/// leaf is completed exactly by the best member of the remaining family under
/// the capacity those plans leave.
struct ChangeSearch<'a> {
    net: &'a SpaceTimeNetwork,
    universe: &'a VarUniverse,
    weights: &'a DynamicWeights<'a>,
    mgr: Manager,
    book: &'a CapacityBook,
    z: NodeId,
    /// Per changing agent, plans by decreasing value.
    plans: &'a [Vec<ExplicitPlan>],
    used: BTreeMap<(usize, u32), u32>,
    chosen: Vec<usize>,
    memo: FxHashMap<Vec<(Vec<VarId>, usize)>, Option<WeightedMember>>,
    best: Option<(f64, Vec<VarId>)>,
    /// Slot prices of the relaxed bound, carried over between calls.
    prices: FxHashMap<(usize, u32), f64>,
}

impl ChangeSearch<'_> {
    fn fits(&self, plan: &ExplicitPlan) -> bool {
        plan.slots
            .iter()
            .all(|&(e, t)| self.used.get(&(e, t)).copied().unwrap_or(0) < self.net.edge(e).capacity_at(t))
    }

    fn book_plan(&mut self, plan: &ExplicitPlan, delta: i32) {
        for &slot in &plan.slots {
            let u = self.used.entry(slot).or_insert(0);
            *u = (*u as i32 + delta) as u32;
            if *u == 0 {
                self.used.remove(&slot);
            }
        }
    }

    /// Best completion by the agents in the shared family.
    fn rest(&mut self) -> Option<f64> {
        let groups = self.book.residual_groups(self.net, self.universe, &self.used);
        if !self.memo.contains_key(&groups) {
            if self.mgr.node_count() > COMPACT_AT {
                self.z = self.mgr.compact(&[self.z])[0];
            }
            let f = self.mgr.filter_groups(self.z, &groups);
            let best = self.mgr.max_weight_member(f, self.weights);
            self.memo.insert(groups.clone(), best);
        }
        self.memo[&groups].as_ref().map(|m| m.weight)
    }

    /// Sum of each remaining agent's best plan that fits on its own.
    fn optimistic(&self, from: usize) -> f64 {
        self.plans[from..]
            .iter()
            .map(|plans| plans.iter().find(|p| self.fits(p)).map_or(0.0, |p| p.value))
            .sum()
    }

    fn residual(&self, slot: (usize, u32)) -> f64 {
        let cap = self.net.edge(slot.0).capacity_at(slot.1);
        cap.saturating_sub(self.used.get(&slot).copied().unwrap_or(0)) as f64
    }

    /// Upper bound on the remaining agents' value with the capacities they
    /// share priced instead of enforced, improved by a few subgradient steps.
    fn relaxed(&mut self, from: usize) -> f64 {
        let mut best = self.optimistic(from);
        if from + 1 >= self.plans.len() {
            return best;
        }
        let fitting: Vec<Vec<&ExplicitPlan>> =
            self.plans[from..].iter().map(|ps| ps.iter().filter(|p| self.fits(p)).collect()).collect();
        let scale = fitting.iter().filter_map(|ps| ps.first()).map(|p| p.value.abs()).fold(1.0, f64::max);
        for k in 0..PRICE_STEPS {
            let mut load: FxHashMap<(usize, u32), f64> = FxHashMap::default();
            let mut bound = 0.0;
            for ps in &fitting {
                let priced = |p: &ExplicitPlan| p.value - p.slots.iter().map(|s| self.prices.get(s).copied().unwrap_or(0.0)).sum::<f64>();
                let Some(top) = ps.iter().max_by(|a, b| priced(a).total_cmp(&priced(b))) else { continue };
                bound += priced(top);
                for &slot in &top.slots {
                    *load.entry(slot).or_insert(0.0) += 1.0;
                }
            }
            let mut slots: Vec<(usize, u32)> = self.prices.keys().chain(load.keys()).copied().collect();
            slots.sort_unstable();
            slots.dedup();
            let mut norm = 0.0;
            let mut grad = Vec::with_capacity(slots.len());
            for &slot in &slots {
                let r = self.residual(slot);
                bound += self.prices.get(&slot).copied().unwrap_or(0.0) * r;
                let g = load.get(&slot).copied().unwrap_or(0.0) - r;
                grad.push(g);
                norm += g * g;
            }
            best = best.min(bound);
            if norm == 0.0 {
                break;
            }
            let step = scale / ((k + 1) as f64 * norm.sqrt());
            for (&slot, g) in slots.iter().zip(grad) {
                let price = self.prices.entry(slot).or_insert(0.0);
                *price = (*price + step * g).max(0.0);
            }
        }
        best
    }

    fn improves(&self, bound: f64) -> bool {
        // a rounding slack keeps float noise from cutting an equal-valued optimum
        self.best
            .as_ref()
            .map_or(true, |(q, _)| bound > q + 1e-9 * q.abs().max(1.0))
    }

    fn descend(&mut self, depth: usize, value: f64) {
        if depth == self.plans.len() {
            let Some(rest) = self.rest() else { return };
            let total = value + rest;
            if self.best.as_ref().map_or(true, |(q, _)| total > *q) {
                let groups = self.book.residual_groups(self.net, self.universe, &self.used);
                let mut vars = self.memo[&groups].as_ref().map(|m| m.vars.clone()).unwrap_or_default();
                for (k, &p) in self.chosen.iter().enumerate() {
                    vars.extend_from_slice(&self.plans[k][p].vars);
                }
                self.best = Some((total, vars));
            }
            return;
        }
        let unconstrained = match self.memo.get(&Vec::new()) {
            Some(m) => m.as_ref().map_or(0.0, |m| m.weight),
            None => {
                let saved = std::mem::take(&mut self.used);
                let r = self.rest().unwrap_or(0.0);
                self.used = saved;
                r
            }
        };
        let tail = self.optimistic(depth + 1);
        for p in 0..self.plans[depth].len() {
            let plan = &self.plans[depth][p];
            // plans come by decreasing value, so nothing later can do better
            if !self.improves(value + plan.value + tail + unconstrained) {
                break;
            }
            if !self.fits(plan) {
                continue;
            }
            self.book_plan(plan, 1);
            let bound = match self.rest() {
                Some(r) => Some(value + plan.value + self.relaxed(depth + 1) + r),
                None => None,
            };
            if bound.is_some_and(|b| self.improves(b)) {
                self.chosen.push(p);
                self.descend(depth + 1, value + plan.value);
                self.chosen.pop();
            }
            self.book_plan(plan, -1);
        }
    }
}

const COMPACT_AT: usize = 2_000_000;
const DIRECT_LIMIT: usize = 12_000_000;
const PRICE_STEPS: usize = 12;
