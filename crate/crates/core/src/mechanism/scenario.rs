use std::cmp::Ordering;

use rand::Rng;

use super::CapacityBook;
use crate::agents::{enumerate_plans, AgentSpec, NormalDist, TripPlanFamily};
use crate::network::{SpaceTimeNetwork, VarUniverse};
use crate::zdd::{Manager, NodeId, VarId};

/// A future agent as forecast by the operator: constraints are known,
/// per-node values only as distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct AnticipatedAgent {
    pub spec: AgentSpec,
    /// Indexed by node; `None` means the node is worth nothing.
    pub values: Vec<Option<NormalDist>>,
}

impl AnticipatedAgent {
    pub fn sampled_spec<R: Rng + ?Sized>(&self, rng: &mut R) -> AgentSpec {
        let mut spec = self.spec.clone();
        for (n, dist) in self.values.iter().enumerate() {
            spec.rewards.node_values[n] = dist.map_or(0.0, |d| d.sample(rng).max(0.0));
        }
        spec
    }

    pub fn mean_spec(&self) -> AgentSpec {
        let mut spec = self.spec.clone();
        for (n, dist) in self.values.iter().enumerate() {
            spec.rewards.node_values[n] = dist.map_or(0.0, |d| d.mean.max(0.0));
        }
        spec
    }
}

/// Forecast demand available to non-myopic mechanisms. Anticipated agent ids
/// name the variable slots the forecast occupies until the real report.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DemandModel {
    pub agents: Vec<AnticipatedAgent>,
}

impl DemandModel {
    pub fn get(&self, id: u32) -> Option<&AnticipatedAgent> {
        self.agents.iter().find(|a| a.spec.id == id)
    }

    pub fn slots_needed(&self) -> usize {
        self.agents.iter().map(|a| a.spec.id as usize + 1).max().unwrap_or(0)
    }
}

/// Joint family of all anticipated agents.
pub struct VirtualFamilies {
    pub z: NodeId,
    pub families: Vec<TripPlanFamily>,
    pub book: CapacityBook,
}

/// Plan families of every anticipated agent and their capacity-filtered join.
pub fn enumerate_virtual(
    demand: &DemandModel,
    net: &SpaceTimeNetwork,
    universe: &VarUniverse,
    mgr: &mut Manager,
) -> VirtualFamilies {
    let mut agents: Vec<&AnticipatedAgent> = demand.agents.iter().collect();
    agents.sort_by_key(|a| (a.spec.t_b, a.spec.id));
    let mut book = CapacityBook::new();
    let mut z = NodeId::TOP;
    let mut families = Vec::with_capacity(agents.len());
    for a in agents {
        let fam = enumerate_plans(net, universe, &a.spec, mgr);
        z = book.join_agent(mgr, net, universe, z, a.spec.id, fam.root);
        families.push(fam);
    }
    VirtualFamilies { z, families, book }
}

/// Canonical member order: at the first variable where two sorted members
/// differ, the one without it comes first.
pub fn canonical_cmp(a: &[VarId], b: &[VarId]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.cmp(y) {
            Ordering::Equal => continue,
            // `a` holds the smaller variable, which `b` lacks
            Ordering::Less => return Ordering::Greater,
            Ordering::Greater => return Ordering::Less,
        }
    }
    a.len().cmp(&b.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_order_matches_enumeration() {
        let mut m = Manager::new();
        let v = VarId;
        let fam = m.build_family(&[vec![v(1)], vec![v(2)], vec![], vec![v(1), v(3)], vec![v(2), v(3)]]);
        let members = m.enumerate_members(fam, 100);
        for w in members.windows(2) {
            assert_eq!(canonical_cmp(&w[0], &w[1]), Ordering::Less, "{w:?}");
        }
    }
}
