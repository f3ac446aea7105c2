mod common;

use std::collections::BTreeSet;

use common::{brute_offline, combinations, dfs_plans, random_instance, replay, scenario};
use prism_alloc::agents::{enumerate_plans, enumerate_plans_with_change, AgentKind, AgentSpec, RewardSpec};
use prism_alloc::experiment::{sample_instance, ScenarioConfig, TrialInstance};
use prism_alloc::mechanism::{
    offline_by_search, offline_optimal, run_mechanism, DemandModel, EventKind, Instance, MechanismConfig, OperatorState, TypeChangeRequest,
    Variant,
};
use prism_alloc::network::{ActionVar, EdgeSpec, SpaceTimeNetwork, VarOrder, VarUniverse};
use prism_alloc::zdd::{Manager, NodeId, RestrictMode};
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

fn small(cfg: &ScenarioConfig, seed: u64, n: usize, dynamic: bool) -> TrialInstance {
    let mut cfg = cfg.clone();
    cfg.demand.n_agents = n;
    cfg.demand.fraction_cruising = 0.3;
    if dynamic {
        cfg.demand.dynamic = Some(Default::default());
    }
    let net = cfg.network().unwrap();
    sample_instance(&cfg, &net, seed).unwrap()
}

#[test]
fn builder_matches_depth_first_enumeration() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(11);
    for _ in 0..150 {
        let inst = random_instance(&mut rng, 3, 6);
        for order in [VarOrder::AgentMajor, VarOrder::TimeMajor] {
            let u = VarUniverse::new(&inst.net, inst.agents.len(), order);
            let mut m = Manager::new();
            for a in &inst.agents {
                let change = inst.change_for(a.id);
                let fam = match change {
                    Some(c) => enumerate_plans_with_change(&inst.net, &u, a, c, &mut m),
                    None => enumerate_plans(&inst.net, &u, a, &mut m),
                };
                let plans = m.restrict(fam.root, fam.cancel, RestrictMode::Excludes);
                let got: BTreeSet<BTreeSet<ActionVar>> = m
                    .enumerate_members(plans, usize::MAX)
                    .into_iter()
                    .map(|p| p.into_iter().map(|v| u.decode(v)).collect())
                    .collect();
                let expect: BTreeSet<BTreeSet<ActionVar>> =
                    dfs_plans(&inst.net, a, change).into_iter().map(|p| p.into_iter().collect()).collect();
                assert_eq!(got, expect, "agent {a:?} change {change:?}");
            }
        }
    }
}

#[test]
fn offline_matches_exhaustive_search() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(5);
    let mut checked = 0;
    while checked < 40 {
        let inst = random_instance(&mut rng, 3, 5);
        if combinations(&inst) > 200_000 {
            continue;
        }
        let expect = brute_offline(&inst);
        for solver in [offline_optimal, offline_by_search] {
            let (trace, _) = solver(&inst, VarOrder::AgentMajor).unwrap();
            let sw = prism_alloc::mechanism::social_welfare(&trace, &inst);
            assert_eq!(sw, expect);
            assert!(replay(&inst, &trace).clean(), "{:?}", replay(&inst, &trace));
        }
        checked += 1;
    }
}

#[test]
fn per_agent_with_one_branch_is_first_come_first_served() {
    let cfg = scenario("baseline_static.json");
    for seed in 0..20 {
        let ti = small(&cfg, seed, 10, seed % 2 == 1);
        let fcfs = run_mechanism(&ti.instance, &MechanismConfig::new(Variant::Fcfs), None, seed).unwrap();
        let cfg = MechanismConfig::new(Variant::MyopicPerAgent).with_max_branch(Some(1));
        let per_agent = run_mechanism(&ti.instance, &cfg, None, seed).unwrap();
        assert_eq!(fcfs.trace, per_agent.trace, "seed {seed}");
    }
}

#[test]
fn unlimited_branch_cut_changes_nothing() {
    let cfg = scenario("baseline_static.json");
    let ti = small(&cfg, 3, 8, false);
    let mut op = OperatorState::new(&ti.instance, MechanismConfig::new(Variant::MyopicExact), &ti.demand, 0).unwrap();
    for _ in 0..ti.instance.net.horizon() {
        op.begin_epoch().unwrap();
        let before = op.z;
        op.branch_cut();
        assert_eq!(op.z, before);
        let pi = op.allocate();
        op.narrow_down(pi).unwrap();
    }
}

#[test]
fn non_myopic_without_forecast_is_myopic() {
    let cfg = scenario("baseline_static.json");
    let empty = DemandModel::default();
    for seed in 0..10 {
        let ti = small(&cfg, seed, 8, seed % 2 == 0);
        let myopic = run_mechanism(&ti.instance, &MechanismConfig::new(Variant::MyopicExact), None, seed).unwrap();
        let nm = MechanismConfig::new(Variant::NonmyopicExact).with_samples(1);
        let nonmyopic = run_mechanism(&ti.instance, &nm, Some(&empty), seed).unwrap();
        assert_eq!(myopic.trace.actions, nonmyopic.trace.actions, "seed {seed}");
    }
}

#[test]
fn branch_and_bound_matches_enumerated_actions() {
    let cfg = scenario("baseline_static.json");
    for seed in 0..6 {
        let ti = small(&cfg, seed, 8, false);
        let m = MechanismConfig::new(Variant::NonmyopicExact).with_samples(3);
        let mut op = OperatorState::new(&ti.instance, m, &ti.demand, seed).unwrap();
        for _ in 0..ti.instance.net.horizon() {
            op.begin_epoch().unwrap();
            let scen = scenario_weights(&op);
            let mut a = op.non_myopic_search(&scen);
            let mut b = op.non_myopic_allocation(&scen);
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b, "seed {seed} epoch {}", op.now);
            op.narrow_down(a).unwrap();
        }
    }
}

// realized weights plus two fixed perturbations, enough to make scenarios differ
fn scenario_weights(op: &OperatorState) -> Vec<prism_alloc::zdd::WeightMap> {
    let base = op.realized_weights();
    let mut out = vec![base.clone()];
    for k in 1..3 {
        let mut w = base.clone();
        for v in 0..op.universe.len() as u32 {
            let id = prism_alloc::zdd::VarId(v);
            if (v + k) % 7 == 0 {
                w.add(id, k as f64);
            }
        }
        out.push(w);
    }
    out
}

fn corridor(capacity: u32) -> SpaceTimeNetwork {
    SpaceTimeNetwork::new(
        vec!["A".into(), "B".into()],
        vec![EdgeSpec::constant(0, 1, 1, capacity, 6), EdgeSpec::constant(1, 0, 1, capacity, 6)],
        6,
        &[],
    )
    .unwrap()
}

fn traveller(id: u32, t_e: u32) -> AgentSpec {
    AgentSpec {
        id,
        origin: 0,
        destination: 1,
        t_b: 0,
        t_e,
        rewards: RewardSpec {
            node_values: vec![10.0, 0.0],
        },
        mandatory: Vec::new(),
        no_stay_at_origin: false,
        must_end_with_stay: false,
        kind: AgentKind::Passing,
    }
}

#[test]
fn type_change_outcomes() {
    // both linger at A; agent 0 has to cross at epoch 1
    let inst = Instance::new(corridor(1), vec![traveller(0, 2), traveller(1, 5)], Vec::new()).unwrap();
    let demand = DemandModel::default();
    let mut op = OperatorState::new(&inst, MechanismConfig::new(Variant::MyopicExact), &demand, 0).unwrap();
    op.step().unwrap();
    op.begin_epoch().unwrap();
    let z = op.z;

    // crossing at epoch 1 as well would overload the edge
    let rushed = AgentSpec { t_e: 2, ..op.spec(1).clone() };
    assert!(!op.handle_type_change(1, TypeChangeRequest::NewType(rushed)).unwrap());
    assert_eq!(op.spec(1).t_e, 5);
    assert_eq!(op.z, z);

    // a later deadline only adds plans
    let relaxed = AgentSpec { t_e: 6, ..op.spec(1).clone() };
    assert!(op.handle_type_change(1, TypeChangeRequest::NewType(relaxed)).unwrap());
    assert_eq!(op.spec(1).t_e, 6);

    assert!(op.handle_type_change(1, TypeChangeRequest::Drop).unwrap());
    assert_ne!(op.z, NodeId::BOTTOM);
    let kinds: Vec<EventKind> = op.trace().events.iter().filter(|e| e.agent == 1).map(|e| e.kind).collect();
    assert_eq!(
        kinds,
        [EventKind::Accepted, EventKind::TypeChangeKept, EventKind::TypeChangeAccepted, EventKind::Dropped]
    );
    let pi = op.allocate();
    op.narrow_down(pi).unwrap();
    assert!(op.trace().actions[1].iter().all(|a| a.agent == 0));
}
