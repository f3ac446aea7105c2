//! Brute-force oracles shared by the integration tests. Nothing here calls
//! into the diagram algebra or the plan builder beyond raw node access.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use prism_alloc::agents::{AgentKind, AgentSpec, MandatoryVisit, RewardSpec, TypeChange};
use prism_alloc::experiment::{load_scenario, ScenarioConfig};
use prism_alloc::mechanism::{AllocationTrace, EventKind, Instance};
use prism_alloc::network::{ActionKind, ActionVar, EdgeSpec, SpaceTimeNetwork};
use prism_alloc::zdd::{Manager, NodeId, VarId};
use rand::Rng;

pub type Member = BTreeSet<u32>;
pub type Family = BTreeSet<Member>;

pub fn scenario(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name);
    load_scenario(&path).expect("bundled scenario")
}

// ---- explicit set families ----

/// Builds the diagram node by node with `make_node`, splitting on the
/// smallest variable.
pub fn to_zdd(mgr: &mut Manager, fam: &Family) -> NodeId {
    if fam.is_empty() {
        return NodeId::BOTTOM;
    }
    let Some(v) = fam.iter().filter_map(|m| m.iter().next().copied()).min() else {
        return NodeId::TOP;
    };
    let lo: Family = fam.iter().filter(|m| !m.contains(&v)).cloned().collect();
    let hi: Family = fam
        .iter()
        .filter(|m| m.contains(&v))
        .map(|m| m.iter().copied().filter(|&x| x != v).collect())
        .collect();
    let lo = to_zdd(mgr, &lo);
    let hi = to_zdd(mgr, &hi);
    mgr.make_node(VarId(v), lo, hi).expect("ordered build")
}

/// Reads a diagram back by walking every path.
pub fn from_zdd(mgr: &Manager, f: NodeId) -> Family {
    fn walk(mgr: &Manager, f: NodeId, path: &mut Vec<u32>, out: &mut Family) {
        if f == NodeId::BOTTOM {
            return;
        }
        if f == NodeId::TOP {
            out.insert(path.iter().copied().collect());
            return;
        }
        let v = mgr.var_of(f).expect("inner node").0;
        walk(mgr, mgr.lo(f), path, out);
        path.push(v);
        walk(mgr, mgr.hi(f), path, out);
        path.pop();
    }
    let mut out = Family::new();
    walk(mgr, f, &mut Vec::new(), &mut out);
    out
}

pub fn join(a: &Family, b: &Family) -> Family {
    let mut out = Family::new();
    for x in a {
        for y in b {
            out.insert(x.union(y).copied().collect());
        }
    }
    out
}

pub fn at_most(f: &Family, group: &[u32], k: usize) -> Family {
    f.iter()
        .filter(|m| group.iter().filter(|v| m.contains(v)).count() <= k)
        .cloned()
        .collect()
}

/// `a` before `b` when, at the smallest variable on which they differ, `a`
/// lacks it.
pub fn canonical_less(a: &Member, b: &Member) -> bool {
    match a.symmetric_difference(b).next() {
        Some(v) => !a.contains(v),
        None => false,
    }
}

/// Heaviest member, canonical-first among equals.
pub fn max_weight(f: &Family, w: &dyn Fn(u32) -> f64) -> Option<(f64, Member)> {
    let mut best: Option<(f64, Member)> = None;
    for m in f {
        let s: f64 = m.iter().map(|&v| w(v)).sum();
        let better = match &best {
            None => true,
            Some((q, bm)) => s > *q || (s == *q && canonical_less(m, bm)),
        };
        if better {
            best = Some((s, m.clone()));
        }
    }
    best
}

pub fn random_family<R: Rng>(rng: &mut R, n_vars: u32, max_members: usize) -> Family {
    let k = rng.gen_range(0..=max_members);
    (0..k)
        .map(|_| (0..n_vars).filter(|_| rng.gen_bool(0.35)).collect())
        .collect()
}

// ---- plan enumeration by depth-first search ----

#[derive(Clone)]
struct Walk {
    t: u32,
    node: usize,
    visits: Vec<u32>,
    fired: bool,
    acts: Vec<ActionVar>,
}

/// Every non-cancel plan of `spec`, with `change` moving the deadline once its
/// trigger stay happens (unless that stay is on the last epoch).
pub fn dfs_plans(net: &SpaceTimeNetwork, spec: &AgentSpec, change: Option<&TypeChange>) -> Vec<Vec<ActionVar>> {
    let mut out = Vec::new();
    let start = Walk {
        t: spec.t_b,
        node: spec.origin,
        visits: vec![0; spec.mandatory.len()],
        fired: false,
        acts: Vec::new(),
    };
    dfs(net, spec, change, start, &mut out);
    out
}

fn dfs(net: &SpaceTimeNetwork, spec: &AgentSpec, change: Option<&TypeChange>, w: Walk, out: &mut Vec<Vec<ActionVar>>) {
    let deadline = match change {
        Some(c) if w.fired => c.new_t_e,
        _ => spec.t_e,
    };
    if w.t > deadline {
        return;
    }
    if w.t == deadline {
        let done = spec.mandatory.iter().zip(&w.visits).all(|(m, &n)| n >= m.min_stay);
        if w.node == spec.destination && done {
            out.push(w.acts);
        }
        return;
    }
    let last = w.t + 1 == deadline;
    let origin_block = spec.no_stay_at_origin && w.t == spec.t_b && w.node == spec.origin;
    let end_block = spec.must_end_with_stay && last && w.node != spec.destination;
    if !origin_block && !end_block {
        let mut next = w.clone();
        next.acts.push(ActionVar::new(spec.id, w.t, ActionKind::Stay(w.node)));
        for (k, m) in spec.mandatory.iter().enumerate() {
            if m.node == w.node && m.window.contains(&w.t) && next.visits[k] < m.min_stay {
                next.visits[k] += 1;
            }
        }
        if let Some(c) = change {
            if !w.fired && c.trigger_node == w.node && c.trigger_window.contains(&w.t) && w.t + 1 < spec.t_e {
                next.fired = true;
            }
        }
        next.t += 1;
        let d = match change {
            Some(c) if next.fired => c.new_t_e,
            _ => spec.t_e,
        };
        if d >= next.t {
            dfs(net, spec, change, next, out);
        }
    }
    if spec.must_end_with_stay && last {
        return;
    }
    // no moves once the destination is reached after leaving home
    let moved = w.acts.iter().any(|a| matches!(a.kind, ActionKind::Move(_)));
    if w.node == spec.destination && moved {
        return;
    }
    for (e, edge) in net.edges().iter().enumerate() {
        let room = if spec.must_end_with_stay { deadline - 1 } else { deadline };
        if edge.from != w.node || w.t + edge.tau > room {
            continue;
        }
        // the origin is only re-entered as the destination
        if edge.to == spec.origin && spec.destination != spec.origin {
            continue;
        }
        let mut next = w.clone();
        next.acts.push(ActionVar::new(spec.id, w.t, ActionKind::Move(e)));
        next.t += edge.tau;
        next.node = edge.to;
        dfs(net, spec, change, next, out);
    }
}

/// True reward of one agent's executed actions: values switch to the changed
/// ones after the first trigger stay.
pub fn plan_value(inst: &Instance, agent: u32, acts: &[ActionVar]) -> f64 {
    let spec = &inst.agents[agent as usize];
    let change = inst.change_for(agent);
    let mut switched_after = None;
    let mut total = 0.0;
    let mut sorted: Vec<&ActionVar> = acts.iter().collect();
    sorted.sort_by_key(|a| a.time);
    for a in sorted {
        let ActionKind::Stay(n) = a.kind else { continue };
        if inst.net.is_active(n, a.time) {
            total += match (switched_after, change) {
                (Some(t0), Some(c)) if a.time > t0 => c.new_rewards.value(n),
                _ => spec.rewards.value(n),
            };
        }
        if switched_after.is_none() && change.is_some_and(|c| c.triggers_on(a)) {
            switched_after = Some(a.time);
        }
    }
    total
}

fn moves(acts: &[ActionVar]) -> Vec<(usize, u32)> {
    acts.iter()
        .filter_map(|a| match a.kind {
            ActionKind::Move(e) => Some((e, a.time)),
            _ => None,
        })
        .collect()
}

/// Exhaustive optimum over every combination of plans (cancel included) that
/// respects all capacities.
pub fn brute_offline(inst: &Instance) -> f64 {
    let options: Vec<Vec<(f64, Vec<(usize, u32)>)>> = inst
        .agents
        .iter()
        .map(|a| {
            let mut v = vec![(0.0, Vec::new())];
            for p in dfs_plans(&inst.net, a, inst.change_for(a.id)) {
                v.push((plan_value(inst, a.id, &p), moves(&p)));
            }
            v
        })
        .collect();
    fn rec(inst: &Instance, options: &[Vec<(f64, Vec<(usize, u32)>)>], k: usize, used: &mut BTreeMap<(usize, u32), u32>) -> f64 {
        if k == options.len() {
            return 0.0;
        }
        let mut best = f64::NEG_INFINITY;
        for (value, slots) in &options[k] {
            if slots
                .iter()
                .any(|&(e, t)| used.get(&(e, t)).copied().unwrap_or(0) >= inst.net.edge(e).capacity_at(t))
            {
                continue;
            }
            for &s in slots {
                *used.entry(s).or_insert(0) += 1;
            }
            best = best.max(value + rec(inst, options, k + 1, used));
            for s in slots {
                *used.get_mut(s).unwrap() -= 1;
            }
        }
        best
    }
    rec(inst, &options, 0, &mut BTreeMap::new())
}

pub fn combinations(inst: &Instance) -> usize {
    inst.agents
        .iter()
        .map(|a| dfs_plans(&inst.net, a, inst.change_for(a.id)).len() + 1)
        .product()
}

// ---- replaying a trace ----

#[derive(Debug, Default, PartialEq)]
pub struct Replay {
    pub capacity: Vec<String>,
    pub deadline: Vec<String>,
    pub visits: Vec<String>,
    pub structure: Vec<String>,
}

impl Replay {
    pub fn clean(&self) -> bool {
        self.capacity.is_empty() && self.deadline.is_empty() && self.visits.is_empty() && self.structure.is_empty()
    }
}

/// Walks every agent through its executed actions and tallies edge entries.
pub fn replay(inst: &Instance, trace: &AllocationTrace) -> Replay {
    let net = &inst.net;
    let mut r = Replay::default();
    let mut entries: BTreeMap<(usize, u32), u32> = BTreeMap::new();
    for (t, acts) in trace.actions.iter().enumerate() {
        for a in acts {
            if a.time != t as u32 {
                r.structure.push(format!("{a} listed under epoch {t}"));
            }
            if let ActionKind::Move(e) = a.kind {
                *entries.entry((e, a.time)).or_insert(0) += 1;
            }
        }
    }
    for (&(e, t), &n) in &entries {
        if n > net.edge(e).capacity_at(t) {
            r.capacity.push(format!("edge {} at {t}: {n} entries", net.edge_name(e)));
        }
    }
    for spec in &inst.agents {
        let id = spec.id;
        let acts: Vec<ActionVar> = trace.agent_actions(id).copied().collect();
        let accepted = trace.events.iter().any(|e| e.agent == id && e.kind == EventKind::Accepted);
        let rejected = trace.events.iter().any(|e| e.agent == id && e.kind == EventKind::Rejected);
        if accepted == rejected {
            r.structure.push(format!("agent {id}: accepted {accepted}, rejected {rejected}"));
            continue;
        }
        if rejected {
            if acts != [ActionVar::new(id, spec.t_b, ActionKind::Cancel)] {
                r.structure.push(format!("agent {id}: rejected but acted {acts:?}"));
            }
            continue;
        }
        let deadline = match inst.change_for(id) {
            Some(c) if trace.change_accepted(id) => c.new_t_e,
            _ => spec.t_e,
        };
        let mut node = spec.origin;
        let mut busy_until = spec.t_b;
        let mut visits = vec![0u32; spec.mandatory.len()];
        let mut k = 0;
        for t in spec.t_b..deadline {
            let here: Vec<&ActionVar> = acts[k..].iter().take_while(|a| a.time == t).collect();
            k += here.len();
            if t < busy_until {
                if !here.is_empty() {
                    r.structure.push(format!("agent {id}: acted at {t} while on an edge"));
                }
                continue;
            }
            let [a] = here.as_slice() else {
                r.structure.push(format!("agent {id}: {} actions at {t}", here.len()));
                break;
            };
            match a.kind {
                ActionKind::Stay(n) if n == node => {
                    for (j, m) in spec.mandatory.iter().enumerate() {
                        if m.node == n && m.window.contains(&t) {
                            visits[j] += 1;
                        }
                    }
                    if spec.no_stay_at_origin && t == spec.t_b && n == spec.origin {
                        r.structure.push(format!("agent {id}: stayed at origin on its first epoch"));
                    }
                    busy_until = t + 1;
                }
                ActionKind::Move(e) if net.edge(e).from == node => {
                    node = net.edge(e).to;
                    busy_until = t + net.edge(e).tau;
                    if busy_until > deadline {
                        r.deadline.push(format!("agent {id}: still on edge at its deadline {deadline}"));
                    }
                }
                _ => r.structure.push(format!("agent {id}: impossible action {a} at node {node}")),
            }
        }
        if k != acts.len() {
            r.deadline.push(format!("agent {id}: acted after its deadline {deadline}"));
        }
        if node != spec.destination || busy_until > deadline {
            r.deadline.push(format!("agent {id}: not at its destination by {deadline}"));
        }
        for (m, &n) in spec.mandatory.iter().zip(&visits) {
            if n < m.min_stay {
                r.visits.push(format!("agent {id}: {n} of {} stays at node {}", m.min_stay, m.node));
            }
        }
        if spec.must_end_with_stay {
            let last = acts.last();
            if !last.is_some_and(|a| a.kind == ActionKind::Stay(spec.destination) && a.time + 1 == deadline) {
                r.structure.push(format!("agent {id}: did not end with a stay"));
            }
        }
    }
    r
}

// ---- random small instances ----

/// The four-node test network with a random capacity per edge and epoch.
pub fn random_network<R: Rng>(rng: &mut R, horizon: u32) -> SpaceTimeNetwork {
    let pairs = [(0, 1, 1), (1, 0, 1), (0, 2, 1), (2, 0, 1), (1, 2, 1), (2, 1, 1), (1, 3, 1), (3, 1, 1), (2, 3, 2), (3, 2, 2)];
    let edges = pairs
        .iter()
        .map(|&(from, to, tau)| EdgeSpec {
            from,
            to,
            tau,
            capacity: (0..horizon).map(|_| rng.gen_range(0..=2)).collect(),
        })
        .collect();
    let names = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
    SpaceTimeNetwork::new(names, edges, horizon, &[(1, vec![2, 3, 4])]).unwrap()
}

/// Integer-valued agents so every welfare sum is exact in floating point.
pub fn random_agent<R: Rng>(rng: &mut R, id: u32, net: &SpaceTimeNetwork) -> AgentSpec {
    let h = net.horizon();
    let t_b = rng.gen_range(0..h - 1);
    let t_e = rng.gen_range(t_b + 1..=h);
    let origin = rng.gen_range(0..4);
    let destination = if rng.gen_bool(0.3) { origin } else { rng.gen_range(0..4) };
    let mut mandatory = Vec::new();
    if rng.gen_bool(0.3) && t_e - t_b >= 2 {
        let node = rng.gen_range(0..4);
        let window: Vec<u32> = (t_b..t_e).filter(|_| rng.gen_bool(0.6)).collect();
        if !window.is_empty() {
            mandatory.push(MandatoryVisit { node, window, min_stay: 1 });
        }
    }
    AgentSpec {
        id,
        origin,
        destination,
        t_b,
        t_e,
        rewards: RewardSpec {
            node_values: (0..4).map(|_| rng.gen_range(0..=20) as f64).collect(),
        },
        mandatory,
        no_stay_at_origin: rng.gen_bool(0.15),
        must_end_with_stay: rng.gen_bool(0.15),
        kind: if origin == destination { AgentKind::Cruising } else { AgentKind::Passing },
    }
}

pub fn random_change<R: Rng>(rng: &mut R, spec: &AgentSpec, net: &SpaceTimeNetwork) -> TypeChange {
    let window: Vec<u32> = (spec.t_b..spec.t_e).filter(|_| rng.gen_bool(0.7)).collect();
    TypeChange {
        agent: spec.id,
        trigger_node: rng.gen_range(0..4),
        trigger_window: window,
        new_rewards: RewardSpec {
            node_values: spec.rewards.node_values.iter().map(|v| v * 3.0).collect(),
        },
        new_t_e: (spec.t_e + rng.gen_range(0..=2)).min(net.horizon()),
    }
}

pub fn random_instance<R: Rng>(rng: &mut R, max_agents: usize, horizon: u32) -> Instance {
    let net = random_network(rng, horizon);
    let n = rng.gen_range(1..=max_agents);
    let agents: Vec<AgentSpec> = (0..n as u32).map(|i| random_agent(rng, i, &net)).collect();
    let mut changes = Vec::new();
    for a in &agents {
        if rng.gen_bool(0.4) {
            changes.push(random_change(rng, a, &net));
        }
    }
    Instance::new(net, agents, changes).unwrap()
}
