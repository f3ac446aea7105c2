//! Agent types, space-time prism plan enumeration and synthetic demand.

use std::collections::BTreeMap;

use rand::Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::network::{ActionKind, ActionVar, SpaceTimeNetwork, VarUniverse};
use crate::zdd::{Manager, MaxWeightOracle, NodeId, PathWeight, RestrictMode, VarId, WeightMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Passing,
    Cruising,
}

/// Stay at `node` for at least `min_stay` epochs drawn from `window`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MandatoryVisit {
    pub node: usize,
    pub window: Vec<u32>,
    pub min_stay: u32,
}

/// Per-epoch value of staying at each node. The reservation utility is 0.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardSpec {
    pub node_values: Vec<f64>,
}

impl RewardSpec {
    pub fn zero(n_nodes: usize) -> Self {
        RewardSpec {
            node_values: vec![0.0; n_nodes],
        }
    }

    pub fn value(&self, n: usize) -> f64 {
        self.node_values.get(n).copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentSpec {
    pub id: u32,
    pub origin: usize,
    pub destination: usize,
    pub t_b: u32,
    pub t_e: u32,
    pub rewards: RewardSpec,
    pub mandatory: Vec<MandatoryVisit>,
    pub no_stay_at_origin: bool,
    pub must_end_with_stay: bool,
    pub kind: AgentKind,
}

impl AgentSpec {
    pub fn validate(&self, net: &SpaceTimeNetwork) -> Result<(), String> {
        if self.t_b >= self.t_e || self.t_e > net.horizon() {
            return Err(format!(
                "agent {}: need t_b < t_e <= {}, got {}..{}",
                self.id,
                net.horizon(),
                self.t_b,
                self.t_e
            ));
        }
        if self.origin >= net.n_nodes() || self.destination >= net.n_nodes() {
            return Err(format!("agent {}: unknown origin or destination", self.id));
        }
        if self.mandatory.len() > 7 {
            return Err(format!("agent {}: at most 7 mandatory visits", self.id));
        }
        for m in &self.mandatory {
            if m.node >= net.n_nodes() || m.min_stay > 255 {
                return Err(format!("agent {}: bad mandatory visit", self.id));
            }
            if m.window.iter().any(|&t| t < self.t_b || t >= self.t_e) {
                return Err(format!("agent {}: mandatory window outside the active period", self.id));
            }
        }
        Ok(())
    }

    pub fn cancel_var(&self) -> ActionVar {
        ActionVar::new(self.id, self.t_b, ActionKind::Cancel)
    }
}

/// Plan family of one agent; always holds the cancel singleton.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripPlanFamily {
    pub agent: u32,
    pub root: NodeId,
    pub cancel: VarId,
}

/// A flagged agent's change of mind, triggered by its first stay at
/// `trigger_node` during `trigger_window`. The new type is reported at the
/// following epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TypeChange {
    pub agent: u32,
    pub trigger_node: usize,
    pub trigger_window: Vec<u32>,
    pub new_rewards: RewardSpec,
    pub new_t_e: u32,
}

impl TypeChange {
    pub fn triggers_on(&self, v: &ActionVar) -> bool {
        v.agent == self.agent
            && v.kind == ActionKind::Stay(self.trigger_node)
            && self.trigger_window.contains(&v.time)
    }
}

/// Plans of `spec` as a diagram, cancel included.
pub fn enumerate_plans(
    net: &SpaceTimeNetwork,
    universe: &VarUniverse,
    spec: &AgentSpec,
    mgr: &mut Manager,
) -> TripPlanFamily {
    let plans = enumerate_trajectories(net, universe, spec, mgr);
    let cancel = universe.encode(spec.cancel_var());
    let single = mgr.singleton(cancel);
    TripPlanFamily {
        agent: spec.id,
        root: mgr.union(plans, single),
        cancel,
    }
}

/// Non-cancel plans only.
pub fn enumerate_trajectories(
    net: &SpaceTimeNetwork,
    universe: &VarUniverse,
    spec: &AgentSpec,
    mgr: &mut Manager,
) -> NodeId {
    let mut builder = PlanBuilder {
        net,
        universe,
        spec,
        change: None,
        memo: FxHashMap::default(),
    };
    builder.build(mgr, spec.t_b, spec.origin, 0)
}

/// Plans of an agent that changes its mind along the way: the original
/// deadline binds until the change fires, the new one afterwards. Cancel included.
pub fn enumerate_plans_with_change(
    net: &SpaceTimeNetwork,
    universe: &VarUniverse,
    spec: &AgentSpec,
    change: &TypeChange,
    mgr: &mut Manager,
) -> TripPlanFamily {
    let mut builder = PlanBuilder {
        net,
        universe,
        spec,
        change: Some(change),
        memo: FxHashMap::default(),
    };
    let plans = builder.build(mgr, spec.t_b, spec.origin, 0);
    let cancel = universe.encode(spec.cancel_var());
    let single = mgr.singleton(cancel);
    TripPlanFamily {
        agent: spec.id,
        root: mgr.union(plans, single),
        cancel,
    }
}

const TRIGGERED: u64 = 1 << 63;
const DEPARTED: u64 = 1 << 62;

struct PlanBuilder<'a> {
    net: &'a SpaceTimeNetwork,
    universe: &'a VarUniverse,
    spec: &'a AgentSpec,
    change: Option<&'a TypeChange>,
    // (epoch, node, packed visit counts | TRIGGERED | DEPARTED)
    memo: FxHashMap<(u32, usize, u64), NodeId>,
}

impl PlanBuilder<'_> {
    fn visits_done(&self, visits: u64) -> bool {
        self.spec
            .mandatory
            .iter()
            .enumerate()
            .all(|(k, m)| (visits >> (8 * k)) & 0xff >= m.min_stay as u64)
    }

    fn credit_stay(&self, visits: u64, node: usize, t: u32) -> u64 {
        let mut out = visits;
        for (k, m) in self.spec.mandatory.iter().enumerate() {
            let have = (out >> (8 * k)) & 0xff;
            if m.node == node && m.window.contains(&t) && have < m.min_stay as u64 {
                out += 1 << (8 * k);
            }
        }
        out
    }

    fn deadline(&self, visits: u64) -> u32 {
        match self.change {
            Some(c) if visits & TRIGGERED != 0 => c.new_t_e,
            _ => self.spec.t_e,
        }
    }

    fn after_stay(&self, visits: u64, node: usize, t: u32) -> u64 {
        let mut out = self.credit_stay(visits, node, t);
        if let Some(c) = self.change {
            // a trigger on the last epoch comes too late to act on
            if c.trigger_node == node && c.trigger_window.contains(&t) && t + 1 < self.spec.t_e {
                out |= TRIGGERED;
            }
        }
        out
    }

    fn build(&mut self, mgr: &mut Manager, t: u32, node: usize, visits: u64) -> NodeId {
        let spec = self.spec;
        let t_e = self.deadline(visits);
        if t > t_e {
            return NodeId::BOTTOM;
        }
        if t == t_e {
            return if node == spec.destination && self.visits_done(visits) {
                NodeId::TOP
            } else {
                NodeId::BOTTOM
            };
        }
        if let Some(&id) = self.memo.get(&(t, node, visits)) {
            return id;
        }
        let last = t + 1 == t_e;
        let mut options: Vec<(VarId, NodeId)> = Vec::new();
        let stay_allowed =
            !(spec.no_stay_at_origin && t == spec.t_b && node == spec.origin) && !(spec.must_end_with_stay && last && node != spec.destination);
        if stay_allowed {
            let next = self.after_stay(visits, node, t);
            // a change firing now may not pull the deadline before the next epoch
            let child = if self.deadline(next) < t + 1 {
                NodeId::BOTTOM
            } else {
                self.build(mgr, t + 1, node, next)
            };
            if child != NodeId::BOTTOM {
                options.push((self.universe.encode(ActionVar::new(spec.id, t, ActionKind::Stay(node))), child));
            }
        }
        // a trip leaves home once and ends on reaching its destination
        let arrived = node == spec.destination && (spec.origin != spec.destination || visits & DEPARTED != 0);
        if !(spec.must_end_with_stay && last) && !arrived {
            for &e in self.net.out_edges(node) {
                let edge = self.net.edge(e);
                // a final stay needs the arrival one epoch early
                let arrive_by = if spec.must_end_with_stay { t_e - 1 } else { t_e };
                if t + edge.tau > arrive_by || (edge.to == spec.origin && spec.origin != spec.destination) {
                    continue;
                }
                let child = self.build(mgr, t + edge.tau, edge.to, visits | DEPARTED);
                if child != NodeId::BOTTOM {
                    options.push((self.universe.encode(ActionVar::new(spec.id, t, ActionKind::Move(e))), child));
                }
            }
        }
        // all options sit at epoch t, above every variable of the children
        options.sort_unstable_by_key(|o| std::cmp::Reverse(o.0));
        let id = options
            .into_iter()
            .fold(NodeId::BOTTOM, |acc, (v, child)| mgr.make_node(v, acc, child).expect("ordered construction"));
        self.memo.insert((t, node, visits), id);
        id
    }
}

/// Stay values discounted to epoch `now`; variables before `now`, moves,
/// cancels and inactive stays weigh 0.
pub fn plan_reward_weights(
    spec: &AgentSpec,
    net: &SpaceTimeNetwork,
    universe: &VarUniverse,
    now: u32,
    beta: f64,
) -> WeightMap {
    let mut w = WeightMap::with_len(universe.len());
    add_reward_weights(&mut w, spec, net, universe, now, beta);
    w
}

pub fn add_reward_weights(
    w: &mut WeightMap,
    spec: &AgentSpec,
    net: &SpaceTimeNetwork,
    universe: &VarUniverse,
    now: u32,
    beta: f64,
) {
    for t in spec.t_b.max(now)..spec.t_e {
        let discount = beta.powi((t - now) as i32);
        for n in 0..net.n_nodes() {
            let v = spec.rewards.value(n);
            if v != 0.0 && net.is_active(n, t) {
                w.set(universe.encode(ActionVar::new(spec.id, t, ActionKind::Stay(n))), discount * v);
            }
        }
    }
}

struct Negated<'a>(&'a WeightMap);

impl PathWeight for Negated<'_> {
    type State = ();
    fn start(&self) {}
    fn take(&self, _: (), var: VarId) -> (f64, ()) {
        (-self.0.get(var), ())
    }
}

/// Accept iff some non-cancel plan exists and the worst one is worth at least 0.
pub fn worst_case_participation(mgr: &mut Manager, fam: &TripPlanFamily, w: &WeightMap) -> bool {
    let plans = mgr.restrict(fam.root, fam.cancel, RestrictMode::Excludes);
    if plans == NodeId::BOTTOM {
        return false;
    }
    let neg = Negated(w);
    let worst = MaxWeightOracle::new(&neg).best(mgr, plans).expect("non-empty family");
    -worst >= 0.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalDist {
    pub mean: f64,
    pub std_dev: f64,
}

impl NormalDist {
    pub fn new(mean: f64, std_dev: f64) -> Self {
        NormalDist { mean, std_dev }
    }

    /// Box-Muller draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        self.mean + self.std_dev * z
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisitConfig {
    pub node: String,
    pub window: Vec<u32>,
    #[serde(default = "one")]
    pub min_stay: u32,
}

fn one() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassConfig {
    pub origin: String,
    pub destination: String,
    /// Report epochs, drawn uniformly.
    pub departures: Vec<u32>,
    /// t_e - t_b.
    pub duration: u32,
    pub values: BTreeMap<String, NormalDist>,
    #[serde(default)]
    pub mandatory: Vec<VisitConfig>,
    #[serde(default)]
    pub no_stay_at_origin: bool,
    #[serde(default)]
    pub must_end_with_stay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicConfig {
    #[serde(default = "half")]
    pub probability: f64,
    #[serde(default = "default_trigger")]
    pub trigger_node: String,
    #[serde(default = "default_boost_node")]
    pub boosted_node: String,
    #[serde(default = "three")]
    pub value_multiplier: f64,
    #[serde(default = "two")]
    pub deadline_extension: u32,
}

fn half() -> f64 {
    0.5
}
fn three() -> f64 {
    3.0
}
fn two() -> u32 {
    2
}
fn default_trigger() -> String {
    "B".into()
}
fn default_boost_node() -> String {
    "C".into()
}

impl Default for DynamicConfig {
    fn default() -> Self {
        DynamicConfig {
            probability: half(),
            trigger_node: default_trigger(),
            boosted_node: default_boost_node(),
            value_multiplier: three(),
            deadline_extension: two(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandConfig {
    pub n_agents: usize,
    pub fraction_cruising: f64,
    #[serde(default = "default_forward")]
    pub passing_forward: ClassConfig,
    #[serde(default = "default_backward")]
    pub passing_backward: ClassConfig,
    #[serde(default = "default_cruising")]
    pub cruising: ClassConfig,
    #[serde(default)]
    pub dynamic: Option<DynamicConfig>,
}

fn values(entries: &[(&str, f64, f64)]) -> BTreeMap<String, NormalDist> {
    entries
        .iter()
        .map(|&(n, mean, var)| (n.to_string(), NormalDist::new(mean, var.sqrt())))
        .collect()
}

pub fn default_forward() -> ClassConfig {
    ClassConfig {
        origin: "A".into(),
        destination: "D".into(),
        departures: vec![0, 1, 2],
        duration: 4,
        values: values(&[("D", 250.0, 10000.0)]),
        mandatory: Vec::new(),
        no_stay_at_origin: true,
        must_end_with_stay: true,
    }
}

pub fn default_backward() -> ClassConfig {
    ClassConfig {
        origin: "D".into(),
        destination: "A".into(),
        departures: vec![2, 3, 4],
        values: values(&[("A", 250.0, 10000.0)]),
        ..default_forward()
    }
}

pub fn default_cruising() -> ClassConfig {
    ClassConfig {
        origin: "A".into(),
        destination: "A".into(),
        departures: vec![0, 1, 2],
        duration: 6,
        values: values(&[
            ("A", 50.0, 400.0),
            ("B", 200.0, 6400.0),
            ("C", 100.0, 1600.0),
            ("D", 50.0, 400.0),
        ]),
        mandatory: vec![VisitConfig {
            node: "B".into(),
            window: vec![3, 4, 5],
            min_stay: 1,
        }],
        no_stay_at_origin: false,
        must_end_with_stay: false,
    }
}

impl DemandConfig {
    pub fn new(n_agents: usize, fraction_cruising: f64) -> Self {
        DemandConfig {
            n_agents,
            fraction_cruising,
            passing_forward: default_forward(),
            passing_backward: default_backward(),
            cruising: default_cruising(),
            dynamic: None,
        }
    }

    /// (forward passing, backward passing, cruising) head counts.
    pub fn class_counts(&self) -> (usize, usize, usize) {
        let cruising = (self.n_agents as f64 * self.fraction_cruising).round() as usize;
        let passing = self.n_agents - cruising.min(self.n_agents);
        let backward = passing / 2;
        (passing - backward, backward, cruising.min(self.n_agents))
    }

    pub fn validate(&self, net: &SpaceTimeNetwork) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.fraction_cruising) {
            return Err(format!("demand.fraction_cruising must lie in [0, 1], got {}", self.fraction_cruising));
        }
        for (key, class) in [
            ("passing_forward", &self.passing_forward),
            ("passing_backward", &self.passing_backward),
            ("cruising", &self.cruising),
        ] {
            let node = |name: &str| {
                net.node_index(name)
                    .ok_or_else(|| format!("demand.{key}: unknown node {name:?}"))
            };
            node(&class.origin)?;
            node(&class.destination)?;
            for n in class.values.keys() {
                node(n)?;
            }
            if class.departures.is_empty() {
                return Err(format!("demand.{key}.departures must not be empty"));
            }
            for &t in &class.departures {
                if class.duration == 0 || t + class.duration > net.horizon() {
                    return Err(format!(
                        "demand.{key}: departure {t} plus duration {} exceeds the horizon",
                        class.duration
                    ));
                }
            }
            for v in &class.values {
                if !(v.1.std_dev >= 0.0) || !v.1.mean.is_finite() {
                    return Err(format!("demand.{key}.values.{}: invalid distribution", v.0));
                }
            }
            for m in &class.mandatory {
                node(&m.node)?;
            }
        }
        if let Some(d) = &self.dynamic {
            if !(0.0..=1.0).contains(&d.probability) {
                return Err(format!("demand.dynamic.probability must lie in [0, 1], got {}", d.probability));
            }
            for n in [&d.trigger_node, &d.boosted_node] {
                if net.node_index(n).is_none() {
                    return Err(format!("demand.dynamic: unknown node {n:?}"));
                }
            }
            if !(d.value_multiplier >= 0.0) {
                return Err("demand.dynamic.value_multiplier must be non-negative".into());
            }
        }
        Ok(())
    }
}

fn draw_agent<R: Rng + ?Sized>(
    class: &ClassConfig,
    kind: AgentKind,
    net: &SpaceTimeNetwork,
    rng: &mut R,
) -> AgentSpec {
    let idx = |name: &str| net.node_index(name).expect("validated node name");
    let t_b = class.departures[rng.gen_range(0..class.departures.len())];
    let mut rewards = RewardSpec::zero(net.n_nodes());
    for (name, dist) in &class.values {
        rewards.node_values[idx(name)] = dist.sample(rng).max(0.0);
    }
    AgentSpec {
        id: 0,
        origin: idx(&class.origin),
        destination: idx(&class.destination),
        t_b,
        t_e: t_b + class.duration,
        rewards,
        mandatory: class
            .mandatory
            .iter()
            .map(|m| MandatoryVisit {
                node: idx(&m.node),
                window: m.window.clone(),
                min_stay: m.min_stay,
            })
            .collect(),
        no_stay_at_origin: class.no_stay_at_origin,
        must_end_with_stay: class.must_end_with_stay,
        kind,
    }
}

/// Draws the roster. Agents are sorted stably by report epoch and numbered in
/// that order, so ids follow report order.
pub fn sample_demand<R: Rng + ?Sized>(
    cfg: &DemandConfig,
    net: &SpaceTimeNetwork,
    rng: &mut R,
) -> (Vec<AgentSpec>, Vec<TypeChange>) {
    let (fwd, bwd, cruise) = cfg.class_counts();
    let mut agents = Vec::with_capacity(cfg.n_agents);
    for (class, kind, count) in [
        (&cfg.passing_forward, AgentKind::Passing, fwd),
        (&cfg.passing_backward, AgentKind::Passing, bwd),
        (&cfg.cruising, AgentKind::Cruising, cruise),
    ] {
        for _ in 0..count {
            agents.push(draw_agent(class, kind, net, rng));
        }
    }
    agents.sort_by_key(|a| a.t_b);
    for (i, a) in agents.iter_mut().enumerate() {
        a.id = i as u32;
    }
    let mut changes = Vec::new();
    if let Some(d) = &cfg.dynamic {
        let trigger = net.node_index(&d.trigger_node).expect("validated");
        let boosted = net.node_index(&d.boosted_node).expect("validated");
        for a in agents.iter().filter(|a| a.kind == AgentKind::Cruising) {
            if rng.gen::<f64>() < d.probability {
                let mut new_rewards = a.rewards.clone();
                new_rewards.node_values[boosted] *= d.value_multiplier;
                let window = a
                    .mandatory
                    .iter()
                    .find(|m| m.node == trigger)
                    .map(|m| m.window.clone())
                    .unwrap_or_else(|| (a.t_b..a.t_e).collect());
                changes.push(TypeChange {
                    agent: a.id,
                    trigger_node: trigger,
                    trigger_window: window,
                    new_rewards,
                    new_t_e: (a.t_e + d.deadline_extension).min(net.horizon()),
                });
            }
        }
    }
    (agents, changes)
}

/// The agent's type after `change`.
pub fn changed_spec(spec: &AgentSpec, change: &TypeChange) -> AgentSpec {
    AgentSpec {
        rewards: change.new_rewards.clone(),
        t_e: change.new_t_e,
        ..spec.clone()
    }
}
