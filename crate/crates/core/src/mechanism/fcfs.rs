use num_bigint::BigUint;

use super::{AllocationTrace, EventKind, Instance, MechanismError, TraceEvent};
use crate::agents::{changed_spec, enumerate_plans, plan_reward_weights, worst_case_participation, AgentSpec};
use crate::network::{flow_incidence, ActionKind, ActionVar, VarOrder, VarUniverse};
use crate::zdd::{Manager, NodeId, VarId};

/// Reservation-table allocation: each agent, in report order, gets its best
/// plan among those that fit the capacity left by earlier agents, and keeps it.
///
/// A flagged agent that changes its type re-plans once against the others'
/// reservations; if nothing fits it keeps its booking.
pub fn run_fcfs(inst: &Instance, beta: f64, order: VarOrder) -> Result<(AllocationTrace, BigUint), MechanismError> {
    let net = &inst.net;
    let horizon = net.horizon();
    let universe = VarUniverse::new(net, inst.agents.len(), order);
    let mut mgr = Manager::new();
    let mut usage = vec![vec![0u32; horizon as usize]; net.n_edges()];
    let mut plans: Vec<Option<Vec<ActionVar>>> = vec![None; inst.agents.len()];
    let mut specs: Vec<AgentSpec> = inst.agents.clone();
    let mut fired = vec![false; inst.changes.len()];
    let mut trace = AllocationTrace::new(horizon);

    let book = |usage: &mut Vec<Vec<u32>>, plan: &[ActionVar], from: u32, delta: i32| {
        for a in plan.iter().filter(|a| a.time >= from) {
            if let Some((e, t)) = flow_incidence(a) {
                let slot = &mut usage[e][t as usize];
                *slot = (*slot as i32 + delta) as u32;
            }
        }
    };
    let saturated = |usage: &Vec<Vec<u32>>, agent: u32, from: u32| -> Vec<VarId> {
        let mut out = Vec::new();
        for (e, per_t) in usage.iter().enumerate() {
            for t in from..horizon {
                if per_t[t as usize] >= net.edge(e).capacity_at(t) {
                    out.push(universe.encode(ActionVar::new(agent, t, ActionKind::Move(e))));
                }
            }
        }
        out.sort_unstable();
        out
    };

    for now in 0..horizon {
        if now > 0 {
            for (k, c) in inst.changes.iter().enumerate() {
                let i = c.agent as usize;
                let Some(plan) = plans[i].clone() else { continue };
                if fired[k] || plan.iter().any(|a| a.kind == ActionKind::Cancel) {
                    continue;
                }
                if !trace.actions[now as usize - 1].iter().any(|a| c.triggers_on(a)) {
                    continue;
                }
                fired[k] = true;
                if now >= specs[i].t_e {
                    continue;
                }
                let new_spec = changed_spec(&specs[i], c);
                let mut prefix: Vec<VarId> = plan
                    .iter()
                    .filter(|a| a.time < now)
                    .map(|&a| universe.encode(a))
                    .collect();
                prefix.sort_unstable();
                let fam = enumerate_plans(net, &universe, &new_spec, &mut mgr);
                let options = mgr.restrict_all(fam.root, &prefix);
                book(&mut usage, &plan, now, -1);
                let blocked = saturated(&usage, c.agent, now);
                let options = mgr.exclude_all(options, &blocked);
                let w = plan_reward_weights(&new_spec, net, &universe, now, beta);
                let kind = match mgr.max_weight_member(options, &w) {
                    Some(best) => {
                        let new_plan: Vec<ActionVar> = best.vars.iter().map(|&v| universe.decode(v)).collect();
                        book(&mut usage, &new_plan, now, 1);
                        plans[i] = Some(new_plan);
                        specs[i] = new_spec;
                        EventKind::TypeChangeAccepted
                    }
                    None => {
                        book(&mut usage, &plan, now, 1);
                        EventKind::TypeChangeKept
                    }
                };
                trace.events.push(TraceEvent {
                    epoch: now,
                    agent: c.agent,
                    kind,
                });
            }
        }

        for spec in specs.iter().filter(|s| s.t_b == now) {
            let fam = enumerate_plans(net, &universe, spec, &mut mgr);
            let undiscounted = plan_reward_weights(spec, net, &universe, spec.t_b, 1.0);
            let root = if worst_case_participation(&mut mgr, &fam, &undiscounted) {
                let blocked = saturated(&usage, spec.id, now);
                mgr.exclude_all(fam.root, &blocked)
            } else {
                mgr.singleton(fam.cancel)
            };
            debug_assert_ne!(root, NodeId::BOTTOM);
            let w = plan_reward_weights(spec, net, &universe, now, beta);
            let best = mgr.max_weight_member(root, &w).expect("cancel is always available");
            let plan: Vec<ActionVar> = best.vars.iter().map(|&v| universe.decode(v)).collect();
            book(&mut usage, &plan, now, 1);
            plans[spec.id as usize] = Some(plan);
        }

        let mut actions = Vec::new();
        for (i, plan) in plans.iter().enumerate() {
            let Some(plan) = plan else { continue };
            let Some(a) = plan.iter().find(|a| a.time == now) else { continue };
            if a.time == specs[i].t_b {
                trace.events.push(TraceEvent {
                    epoch: now,
                    agent: i as u32,
                    kind: if a.kind == ActionKind::Cancel {
                        EventKind::Rejected
                    } else {
                        EventKind::Accepted
                    },
                });
            }
            actions.push(*a);
        }
        trace.actions[now as usize] = actions;
        mgr.clear_caches();
    }
    for e in 0..net.n_edges() {
        for t in 0..horizon {
            if usage[e][t as usize] > net.edge(e).capacity_at(t) {
                return Err(MechanismError::InvariantViolation {
                    epoch: t,
                    detail: format!("edge {} over capacity", net.edge_name(e)),
                });
            }
        }
    }
    Ok((trace, BigUint::from(1u32)))
}
