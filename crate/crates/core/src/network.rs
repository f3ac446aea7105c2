//! Capacitated directed network, its space-time expansion and the mapping
//! between agent actions and diagram variables.
//!
//! Decision epochs run over `0..horizon`; states exist at `0..=horizon`. A move
//! consumes one variable at the epoch it enters the edge, and capacity is
//! counted at that entry epoch only.

use std::fmt;

use crate::zdd::VarId;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum NetworkError {
    #[error("edge {index} ({from}->{to}) references an unknown node")]
    UnknownEndpoint { index: usize, from: usize, to: usize },
    #[error("edge {index} has travel time {tau}; it must be at least 1")]
    BadTravelTime { index: usize, tau: u32 },
    #[error("edge {index} capacity profile has {got} entries, expected {expected}")]
    BadCapacityProfile { index: usize, got: usize, expected: usize },
    #[error("horizon must be positive")]
    ZeroHorizon,
    #[error("active window of node {node} mentions epoch {t} beyond the horizon")]
    BadActiveWindow { node: usize, t: u32 },
    #[error("duplicate node name {0:?}")]
    DuplicateNode(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSpec {
    pub from: usize,
    pub to: usize,
    pub tau: u32,
    /// Entry capacity per decision epoch.
    pub capacity: Vec<u32>,
}

impl EdgeSpec {
    pub fn constant(from: usize, to: usize, tau: u32, capacity: u32, horizon: u32) -> Self {
        EdgeSpec {
            from,
            to,
            tau,
            capacity: vec![capacity; horizon as usize],
        }
    }

    pub fn capacity_at(&self, t: u32) -> u32 {
        self.capacity[t as usize]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpaceTimeNetwork {
    names: Vec<String>,
    edges: Vec<EdgeSpec>,
    horizon: u32,
    // per node, the active flag for each state time 0..=horizon; None = always
    active: Vec<Option<Vec<bool>>>,
    out: Vec<Vec<usize>>,
}

impl SpaceTimeNetwork {
    pub fn new(
        names: Vec<String>,
        edges: Vec<EdgeSpec>,
        horizon: u32,
        node_active: &[(usize, Vec<u32>)],
    ) -> Result<Self, NetworkError> {
        if horizon == 0 {
            return Err(NetworkError::ZeroHorizon);
        }
        for (i, name) in names.iter().enumerate() {
            if names[..i].contains(name) {
                return Err(NetworkError::DuplicateNode(name.clone()));
            }
        }
        let n = names.len();
        let mut out = vec![Vec::new(); n];
        for (index, e) in edges.iter().enumerate() {
            if e.from >= n || e.to >= n {
                return Err(NetworkError::UnknownEndpoint {
                    index,
                    from: e.from,
                    to: e.to,
                });
            }
            if e.tau == 0 {
                return Err(NetworkError::BadTravelTime { index, tau: e.tau });
            }
            if e.capacity.len() != horizon as usize {
                return Err(NetworkError::BadCapacityProfile {
                    index,
                    got: e.capacity.len(),
                    expected: horizon as usize,
                });
            }
            out[e.from].push(index);
        }
        let mut active = vec![None; n];
        for (node, times) in node_active {
            if *node >= n {
                return Err(NetworkError::UnknownEndpoint {
                    index: usize::MAX,
                    from: *node,
                    to: *node,
                });
            }
            let mut flags = vec![false; horizon as usize + 1];
            for &t in times {
                if t > horizon {
                    return Err(NetworkError::BadActiveWindow { node: *node, t });
                }
                flags[t as usize] = true;
            }
            active[*node] = Some(flags);
        }
        Ok(SpaceTimeNetwork {
            names,
            edges,
            horizon,
            active,
            out,
        })
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn n_nodes(&self) -> usize {
        self.names.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn node_name(&self, n: usize) -> &str {
        &self.names[n]
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|x| x == name)
    }

    pub fn edge(&self, e: usize) -> &EdgeSpec {
        &self.edges[e]
    }

    pub fn edges(&self) -> &[EdgeSpec] {
        &self.edges
    }

    pub fn out_edges(&self, n: usize) -> &[usize] {
        &self.out[n]
    }

    pub fn edge_name(&self, e: usize) -> String {
        let edge = &self.edges[e];
        format!("{}{}", self.names[edge.from], self.names[edge.to])
    }

    pub fn is_active(&self, n: usize, t: u32) -> bool {
        match &self.active[n] {
            None => true,
            Some(flags) => flags.get(t as usize).copied().unwrap_or(false),
        }
    }

    /// Multiplies every capacity entry by `factor`.
    pub fn scale_capacities(&mut self, factor: u32) {
        for e in &mut self.edges {
            for c in &mut e.capacity {
                *c = c.saturating_mul(factor);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActionKind {
    Stay(usize),
    Move(usize),
    Cancel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActionVar {
    pub agent: u32,
    pub time: u32,
    pub kind: ActionKind,
}

impl ActionVar {
    pub fn new(agent: u32, time: u32, kind: ActionKind) -> Self {
        ActionVar { agent, time, kind }
    }
}

impl fmt::Display for ActionVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ActionKind::Stay(n) => write!(f, "a{}@{}:stay({})", self.agent, self.time, n),
            ActionKind::Move(e) => write!(f, "a{}@{}:move({})", self.agent, self.time, e),
            ActionKind::Cancel => write!(f, "a{}@{}:cancel", self.agent, self.time),
        }
    }
}

/// Entering `(edge, epoch)` of a move; stays and cancels carry no flow.
pub fn flow_incidence(v: &ActionVar) -> Option<(usize, u32)> {
    match v.kind {
        ActionKind::Move(e) => Some((e, v.time)),
        _ => None,
    }
}

/// Global ordering of action variables.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarOrder {
    /// Epoch first, then agent, then action slot.
    TimeMajor,
    /// Agent first, then epoch, then action slot. Keeps each agent's plan in a
    /// contiguous band so joint families stay narrow.
    #[default]
    AgentMajor,
}

/// Bijection between [`ActionVar`]s of a fixed roster and [`VarId`]s.
///
/// Within one (agent, epoch) the slots are the stays by node index, then the
/// moves by edge index, then cancel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarUniverse {
    order: VarOrder,
    n_agents: u32,
    horizon: u32,
    n_nodes: u32,
    n_edges: u32,
}

impl VarUniverse {
    pub fn new(net: &SpaceTimeNetwork, n_agents: usize, order: VarOrder) -> Self {
        let u = VarUniverse {
            order,
            n_agents: n_agents as u32,
            horizon: net.horizon(),
            n_nodes: net.n_nodes() as u32,
            n_edges: net.n_edges() as u32,
        };
        assert!(
            (u.len() as u64) < u32::MAX as u64,
            "variable universe too large"
        );
        u
    }

    pub fn order(&self) -> VarOrder {
        self.order
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents as usize
    }

    fn slots(&self) -> u32 {
        self.n_nodes + self.n_edges + 1
    }

    pub fn len(&self) -> usize {
        self.n_agents as usize * self.horizon as usize * self.slots() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn slot(&self, kind: ActionKind) -> u32 {
        match kind {
            ActionKind::Stay(n) => n as u32,
            ActionKind::Move(e) => self.n_nodes + e as u32,
            ActionKind::Cancel => self.n_nodes + self.n_edges,
        }
    }

    pub fn encode(&self, v: ActionVar) -> VarId {
        debug_assert!(v.agent < self.n_agents && v.time < self.horizon);
        let slot = self.slot(v.kind);
        let block = match self.order {
            VarOrder::TimeMajor => v.time * self.n_agents + v.agent,
            VarOrder::AgentMajor => v.agent * self.horizon + v.time,
        };
        VarId(block * self.slots() + slot)
    }

    pub fn decode(&self, id: VarId) -> ActionVar {
        let slot = id.0 % self.slots();
        let block = id.0 / self.slots();
        let (agent, time) = match self.order {
            VarOrder::TimeMajor => (block % self.n_agents, block / self.n_agents),
            VarOrder::AgentMajor => (block / self.horizon, block % self.horizon),
        };
        let kind = if slot < self.n_nodes {
            ActionKind::Stay(slot as usize)
        } else if slot < self.n_nodes + self.n_edges {
            ActionKind::Move((slot - self.n_nodes) as usize)
        } else {
            ActionKind::Cancel
        };
        ActionVar { agent, time, kind }
    }

    pub fn agent_of(&self, id: VarId) -> u32 {
        let block = id.0 / self.slots();
        match self.order {
            VarOrder::TimeMajor => block % self.n_agents,
            VarOrder::AgentMajor => block / self.horizon,
        }
    }

    pub fn time_of(&self, id: VarId) -> u32 {
        let block = id.0 / self.slots();
        match self.order {
            VarOrder::TimeMajor => block / self.n_agents,
            VarOrder::AgentMajor => block % self.horizon,
        }
    }

    /// Every variable of `agent`, ascending.
    pub fn agent_vars(&self, agent: u32) -> Vec<VarId> {
        let mut out: Vec<VarId> = (0..self.horizon)
            .flat_map(|t| (0..self.slots()).map(move |s| (t, s)))
            .map(|(t, s)| {
                let block = match self.order {
                    VarOrder::TimeMajor => t * self.n_agents + agent,
                    VarOrder::AgentMajor => agent * self.horizon + t,
                };
                VarId(block * self.slots() + s)
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Every variable at epoch `t`, ascending.
    pub fn epoch_vars(&self, t: u32) -> Vec<VarId> {
        let mut out = Vec::with_capacity(self.n_agents as usize * self.slots() as usize);
        for agent in 0..self.n_agents {
            for s in 0..self.slots() {
                let block = match self.order {
                    VarOrder::TimeMajor => t * self.n_agents + agent,
                    VarOrder::AgentMajor => agent * self.horizon + t,
                };
                out.push(VarId(block * self.slots() + s));
            }
        }
        out.sort_unstable();
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Position {
    AtNode(usize),
    MidEdge { edge: usize, remaining: u32 },
    Cancelled,
    Finished,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AgentState {
    pub agent: u32,
    pub time: u32,
    pub position: Position,
}

/// Actions open to an agent in `st`. Mid-edge, cancelled and finished agents
/// have none: a traversal is covered by the move variable taken at entry.
pub fn feasible_actions(net: &SpaceTimeNetwork, st: &AgentState) -> Vec<ActionVar> {
    assert!(st.time < net.horizon(), "no decisions at or after the horizon");
    match st.position {
        Position::AtNode(n) => {
            let mut out = vec![ActionVar::new(st.agent, st.time, ActionKind::Stay(n))];
            for &e in net.out_edges(n) {
                if st.time + net.edge(e).tau <= net.horizon() {
                    out.push(ActionVar::new(st.agent, st.time, ActionKind::Move(e)));
                }
            }
            out
        }
        _ => Vec::new(),
    }
}

/// State after taking `action` (or nothing, for mid-edge) during one epoch.
pub fn advance(net: &SpaceTimeNetwork, st: &AgentState, action: Option<ActionKind>) -> AgentState {
    let position = match (st.position, action) {
        (Position::AtNode(_), Some(ActionKind::Stay(n))) => Position::AtNode(n),
        (Position::AtNode(_), Some(ActionKind::Move(e))) => {
            let edge = net.edge(e);
            if edge.tau == 1 {
                Position::AtNode(edge.to)
            } else {
                Position::MidEdge {
                    edge: e,
                    remaining: edge.tau - 1,
                }
            }
        }
        (_, Some(ActionKind::Cancel)) => Position::Cancelled,
        (Position::MidEdge { edge, remaining }, None) => {
            if remaining == 1 {
                Position::AtNode(net.edge(edge).to)
            } else {
                Position::MidEdge {
                    edge,
                    remaining: remaining - 1,
                }
            }
        }
        (p, None) => p,
        (p, Some(a)) => panic!("action {a:?} is not available from {p:?}"),
    };
    AgentState {
        agent: st.agent,
        time: st.time + 1,
        position,
    }
}

/// One capacity constraint: at most `bound` of `vars` may be chosen together.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CapacityGroup {
    pub edge: usize,
    pub time: u32,
    pub vars: Vec<VarId>,
    pub bound: u32,
}

/// One group per (edge, epoch) over the move variables of `agents`; groups
/// that cannot bind are left out.
pub fn capacity_groups(net: &SpaceTimeNetwork, universe: &VarUniverse, agents: &[u32]) -> Vec<CapacityGroup> {
    let mut groups = Vec::new();
    for e in 0..net.n_edges() {
        for t in 0..net.horizon() {
            let bound = net.edge(e).capacity_at(t);
            if bound as usize >= agents.len() {
                continue;
            }
            let mut vars: Vec<VarId> = agents
                .iter()
                .map(|&a| universe.encode(ActionVar::new(a, t, ActionKind::Move(e))))
                .collect();
            vars.sort_unstable();
            groups.push(CapacityGroup {
                edge: e,
                time: t,
                vars,
                bound,
            });
        }
    }
    groups
}
