use std::collections::BTreeMap;

use rustc_hash::FxHashMap;

use crate::network::{ActionKind, ActionVar, SpaceTimeNetwork, VarUniverse};
use crate::zdd::{Manager, NodeId, VarId};

/// Tracks, per (edge, epoch), which agents' families can enter the edge, so
/// that joining an agent only filters the groups it takes part in.
#[derive(Clone, Debug, Default)]
pub struct CapacityBook {
    members: FxHashMap<(usize, u32), Vec<u32>>,
}

impl CapacityBook {
    pub fn new() -> Self {
        Self::default()
    }

    /// `join(z, family)` restricted to members within every capacity the
    /// agent shares with previously registered agents.
    pub fn join_agent(
        &mut self,
        mgr: &mut Manager,
        net: &SpaceTimeNetwork,
        universe: &VarUniverse,
        z: NodeId,
        agent: u32,
        family: NodeId,
    ) -> NodeId {
        let groups = self.register(mgr, net, universe, agent, family);
        mgr.join_filtered(z, family, &groups)
    }

    /// Registers the moves of `family` under `agent` and filters `z` on each
    /// group the agent belongs to.
    pub fn constrain(
        &mut self,
        mgr: &mut Manager,
        net: &SpaceTimeNetwork,
        universe: &VarUniverse,
        z: NodeId,
        agent: u32,
        family: NodeId,
    ) -> NodeId {
        let groups = self.register(mgr, net, universe, agent, family);
        mgr.filter_groups(z, &groups)
    }

    /// Adds the agent to the groups of its moves and returns the groups that
    /// now exceed their bound.
    fn register(
        &mut self,
        mgr: &Manager,
        net: &SpaceTimeNetwork,
        universe: &VarUniverse,
        agent: u32,
        family: NodeId,
    ) -> Vec<(Vec<VarId>, usize)> {
        let mut groups = Vec::new();
        for v in mgr.support(family) {
            let a = universe.decode(v);
            let ActionKind::Move(e) = a.kind else { continue };
            let list = self.members.entry((e, a.time)).or_default();
            if let Err(pos) = list.binary_search(&agent) {
                list.insert(pos, agent);
            }
            let bound = net.edge(e).capacity_at(a.time) as usize;
            if list.len() > bound {
                let group: Vec<VarId> = list
                    .iter()
                    .map(|&i| universe.encode(ActionVar::new(i, a.time, ActionKind::Move(e))))
                    .collect();
                groups.push((group, bound));
            }
        }
        groups
    }

    /// Groups that bind once `used` units of each slot are taken by agents
    /// outside the book.
    pub fn residual_groups(
        &self,
        net: &SpaceTimeNetwork,
        universe: &VarUniverse,
        used: &BTreeMap<(usize, u32), u32>,
    ) -> Vec<(Vec<VarId>, usize)> {
        let mut groups = Vec::new();
        for (&(e, t), &u) in used {
            let Some(list) = self.members.get(&(e, t)) else { continue };
            let bound = net.edge(e).capacity_at(t).saturating_sub(u) as usize;
            if list.len() > bound {
                let group = list
                    .iter()
                    .map(|&i| universe.encode(ActionVar::new(i, t, ActionKind::Move(e))))
                    .collect();
                groups.push((group, bound));
            }
        }
        groups
    }

    pub fn remove_agent(&mut self, agent: u32) {
        for list in self.members.values_mut() {
            if let Ok(pos) = list.binary_search(&agent) {
                list.remove(pos);
            }
        }
    }
}
