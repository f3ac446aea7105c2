//! Allocation mechanisms over a joint plan family.
//!
//! Every variant except FCFS and the offline benchmark runs through
//! [`OperatorState`]: agents report at their start epoch, their plan families
//! are joined into `Z` and capacity-filtered, one joint action is chosen and
//! executed per epoch, and `Z` is narrowed to the executed prefix. `Z` is never
//! empty while an accepted agent is travelling.

mod capacity;
mod fcfs;
mod offline;
mod operator;
mod scenario;

use std::fmt;

use num_bigint::BigUint;

use crate::agents::{AgentSpec, TypeChange};
use crate::network::{ActionKind, ActionVar, SpaceTimeNetwork, VarOrder};

pub use capacity::CapacityBook;
pub use fcfs::run_fcfs;
pub use offline::{offline_by_search, offline_optimal, DynamicWeights};
pub use operator::{OperatorState, TypeChangeRequest};
pub use scenario::{canonical_cmp, enumerate_virtual, AnticipatedAgent, DemandModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Fcfs,
    MyopicExact,
    MyopicPerAgent,
    NonmyopicExact,
    NonmyopicPerAgent,
    Offline,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Fcfs,
        Variant::MyopicExact,
        Variant::MyopicPerAgent,
        Variant::NonmyopicExact,
        Variant::NonmyopicPerAgent,
        Variant::Offline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fcfs => "fcfs",
            Variant::MyopicExact => "myopic_exact",
            Variant::MyopicPerAgent => "myopic_per_agent",
            Variant::NonmyopicExact => "nonmyopic_exact",
            Variant::NonmyopicPerAgent => "nonmyopic_per_agent",
            Variant::Offline => "offline",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn is_nonmyopic(self) -> bool {
        matches!(self, Variant::NonmyopicExact | Variant::NonmyopicPerAgent)
    }

    pub fn is_per_agent(self) -> bool {
        matches!(self, Variant::MyopicPerAgent | Variant::NonmyopicPerAgent)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MechanismConfig {
    pub variant: Variant,
    /// `None` keeps every joint plan.
    pub max_branch: Option<usize>,
    pub samples: usize,
    pub beta: f64,
    pub order: VarOrder,
}

impl MechanismConfig {
    pub fn new(variant: Variant) -> Self {
        MechanismConfig {
            variant,
            max_branch: None,
            samples: 10,
            beta: 1.0,
            order: VarOrder::default(),
        }
    }

    pub fn with_max_branch(mut self, n: Option<usize>) -> Self {
        self.max_branch = n;
        self
    }

    pub fn with_samples(mut self, m: usize) -> Self {
        self.samples = m;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_order(mut self, order: VarOrder) -> Self {
        self.order = order;
        self
    }

    pub fn validate(&self) -> Result<(), MechanismError> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(MechanismError::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if self.max_branch == Some(0) {
            return Err(MechanismError::Config("max_branch must be at least 1".into()));
        }
        if self.variant.is_nonmyopic() && self.samples == 0 {
            return Err(MechanismError::Config("samples must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MechanismError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invariant violated at epoch {epoch}: {detail}")]
    InvariantViolation { epoch: u32, detail: String },
}

/// A roster of agents over a network. Agent `i` must carry id `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub net: SpaceTimeNetwork,
    pub agents: Vec<AgentSpec>,
    pub changes: Vec<TypeChange>,
}

impl Instance {
    pub fn new(net: SpaceTimeNetwork, agents: Vec<AgentSpec>, changes: Vec<TypeChange>) -> Result<Self, MechanismError> {
        for (i, a) in agents.iter().enumerate() {
            if a.id as usize != i {
                return Err(MechanismError::Config(format!("agent at position {i} has id {}", a.id)));
            }
            a.validate(&net).map_err(MechanismError::Config)?;
        }
        let mut seen = vec![false; agents.len()];
        for c in &changes {
            let Some(flag) = seen.get_mut(c.agent as usize) else {
                return Err(MechanismError::Config(format!("type change for unknown agent {}", c.agent)));
            };
            if std::mem::replace(flag, true) {
                return Err(MechanismError::Config(format!("agent {} has two type changes", c.agent)));
            }
            if c.new_t_e > net.horizon() || c.new_t_e <= agents[c.agent as usize].t_b {
                return Err(MechanismError::Config(format!("agent {}: bad new deadline {}", c.agent, c.new_t_e)));
            }
        }
        let mut changes = changes;
        changes.sort_by_key(|c| c.agent);
        Ok(Instance { net, agents, changes })
    }

    pub fn change_for(&self, agent: u32) -> Option<&TypeChange> {
        self.changes.iter().find(|c| c.agent == agent)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Accepted,
    Rejected,
    TypeChangeAccepted,
    TypeChangeKept,
    Dropped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub epoch: u32,
    pub agent: u32,
    pub kind: EventKind,
}

/// Executed joint actions, one list per epoch sorted by agent. Agents in the
/// middle of an edge have no entry.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AllocationTrace {
    pub actions: Vec<Vec<ActionVar>>,
    pub events: Vec<TraceEvent>,
}

impl AllocationTrace {
    pub fn new(horizon: u32) -> Self {
        AllocationTrace {
            actions: vec![Vec::new(); horizon as usize],
            events: Vec::new(),
        }
    }

    pub fn agent_actions(&self, agent: u32) -> impl Iterator<Item = &ActionVar> {
        self.actions.iter().flatten().filter(move |a| a.agent == agent)
    }

    pub fn n_rejected(&self) -> usize {
        self.events.iter().filter(|e| e.kind == EventKind::Rejected).count()
    }

    pub fn change_accepted(&self, agent: u32) -> bool {
        self.events
            .iter()
            .any(|e| e.agent == agent && e.kind == EventKind::TypeChangeAccepted)
    }
}

/// Epoch of the stay that fires `agent`'s type change in `trace`, if any.
pub fn trigger_epoch(trace: &AllocationTrace, change: &TypeChange) -> Option<u32> {
    trace
        .agent_actions(change.agent)
        .find(|a| change.triggers_on(a))
        .map(|a| a.time)
}

/// Undiscounted total reward of the executed trace under the agents' true
/// types: values switch to the changed ones from the epoch after the trigger.
pub fn social_welfare(trace: &AllocationTrace, inst: &Instance) -> f64 {
    discounted_sw(trace, inst, 0, 1.0)
}

pub fn discounted_sw(trace: &AllocationTrace, inst: &Instance, from: u32, beta: f64) -> f64 {
    let switch: Vec<Option<u32>> = inst
        .agents
        .iter()
        .map(|a| inst.change_for(a.id).and_then(|c| trigger_epoch(trace, c)))
        .collect();
    let mut total = 0.0;
    for (t, actions) in trace.actions.iter().enumerate().skip(from as usize) {
        let t = t as u32;
        let discount = beta.powi((t - from) as i32);
        for a in actions {
            let ActionKind::Stay(n) = a.kind else { continue };
            if !inst.net.is_active(n, t) {
                continue;
            }
            let spec = &inst.agents[a.agent as usize];
            let value = match (switch[a.agent as usize], inst.change_for(a.agent)) {
                (Some(t0), Some(c)) if t > t0 => c.new_rewards.value(n),
                _ => spec.rewards.value(n),
            };
            total += discount * value;
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub trace: AllocationTrace,
    pub sw: f64,
    pub n_rejected: usize,
    /// Largest joint plan count held during the run.
    pub peak_count: BigUint,
}

/// Runs one mechanism on `inst`. `demand` feeds the non-myopic variants and
/// `seed` their scenario sampling.
pub fn run_mechanism(
    inst: &Instance,
    cfg: &MechanismConfig,
    demand: Option<&DemandModel>,
    seed: u64,
) -> Result<RunOutcome, MechanismError> {
    cfg.validate()?;
    let (trace, peak_count) = match cfg.variant {
        Variant::Fcfs => run_fcfs(inst, cfg.beta, cfg.order)?,
        Variant::Offline => offline_optimal(inst, cfg.order)?,
        _ => {
            let empty = DemandModel::default();
            let demand = if cfg.variant.is_nonmyopic() {
                demand.unwrap_or(&empty)
            } else {
                &empty
            };
            OperatorState::new(inst, cfg.clone(), demand, seed)?.run()?
        }
    };
    Ok(RunOutcome {
        sw: social_welfare(&trace, inst),
        n_rejected: trace.n_rejected(),
        trace,
        peak_count,
    })
}
