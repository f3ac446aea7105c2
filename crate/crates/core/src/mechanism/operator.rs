use num_bigint::BigUint;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

use super::scenario::enumerate_virtual;
use super::{
    AllocationTrace, CapacityBook, DemandModel, EventKind, Instance, MechanismConfig, MechanismError, TraceEvent, Variant,
};
use crate::agents::{add_reward_weights, changed_spec, enumerate_plans, worst_case_participation, AgentSpec, TripPlanFamily};
use crate::mechanism::canonical_cmp;
use crate::network::{advance, feasible_actions, ActionKind, ActionVar, AgentState, Position, VarUniverse};
use crate::zdd::{Manager, MaxWeightOracle, NodeId, RestrictMode, VarId, WeightMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Unreported,
    Active,
    Cancelled,
    Dropped,
}

/// A reported change of type for an agent already travelling.
#[derive(Clone, Debug, PartialEq)]
pub enum TypeChangeRequest {
    /// New rewards and constraints; origin and start must be unchanged.
    NewType(AgentSpec),
    /// Leave the service now.
    Drop,
}

/// Operator of the joint-family mechanisms: exact and per-agent, myopic and
/// non-myopic, with optional branch cutting.
pub struct OperatorState<'a> {
    inst: &'a Instance,
    demand: &'a DemandModel,
    cfg: MechanismConfig,
    pub universe: VarUniverse,
    pub mgr: Manager,
    pub z: NodeId,
    pub now: u32,
    specs: Vec<AgentSpec>,
    families: Vec<Option<TripPlanFamily>>,
    status: Vec<Status>,
    states: Vec<AgentState>,
    executed: Vec<Vec<VarId>>,
    // forecast families still standing in for agents that have not reported
    pending: Vec<Option<(TripPlanFamily, u32)>>,
    book: CapacityBook,
    fired: Vec<bool>,
    trace: AllocationTrace,
    peak: BigUint,
    rng: Xoshiro256StarStar,
}

impl<'a> OperatorState<'a> {
    pub fn new(inst: &'a Instance, cfg: MechanismConfig, demand: &'a DemandModel, seed: u64) -> Result<Self, MechanismError> {
        cfg.validate()?;
        if matches!(cfg.variant, Variant::Fcfs | Variant::Offline) {
            return Err(MechanismError::Config(format!("{} does not run on the joint-family operator", cfg.variant)));
        }
        let n_slots = inst.agents.len().max(demand.slots_needed());
        let universe = VarUniverse::new(&inst.net, n_slots, cfg.order);
        let n = inst.agents.len();
        let mut op = OperatorState {
            inst,
            demand,
            cfg,
            universe,
            mgr: Manager::new(),
            z: NodeId::TOP,
            now: 0,
            specs: inst.agents.clone(),
            families: vec![None; n],
            status: vec![Status::Unreported; n],
            states: inst
                .agents
                .iter()
                .map(|a| AgentState {
                    agent: a.id,
                    time: a.t_b,
                    position: Position::AtNode(a.origin),
                })
                .collect(),
            executed: vec![Vec::new(); n],
            pending: vec![None; n_slots],
            book: CapacityBook::new(),
            fired: vec![false; inst.changes.len()],
            trace: AllocationTrace::new(inst.net.horizon()),
            peak: BigUint::from(0u32),
            rng: Xoshiro256StarStar::seed_from_u64(seed),
        };
        if op.cfg.variant.is_nonmyopic() && !demand.agents.is_empty() {
            for a in &demand.agents {
                a.spec.validate(&inst.net).map_err(MechanismError::Config)?;
            }
            let vf = enumerate_virtual(demand, &inst.net, &op.universe, &mut op.mgr);
            op.z = vf.z;
            op.book = vf.book;
            for (fam, a) in vf.families.iter().zip(sorted_forecast(demand)) {
                op.pending[fam.agent as usize] = Some((*fam, a.spec.t_b));
            }
            op.branch_cut();
        }
        Ok(op)
    }

    pub fn trace(&self) -> &AllocationTrace {
        &self.trace
    }

    pub fn peak_count(&self) -> &BigUint {
        &self.peak
    }

    pub fn spec(&self, agent: u32) -> &AgentSpec {
        &self.specs[agent as usize]
    }

    /// Executed variables of `agent`, oldest first.
    pub fn executed(&self, agent: u32) -> &[VarId] {
        &self.executed[agent as usize]
    }

    pub fn run(mut self) -> Result<(AllocationTrace, BigUint), MechanismError> {
        for _ in 0..self.inst.net.horizon() {
            self.step()?;
        }
        Ok((self.trace, self.peak))
    }

    /// One epoch: type changes, reports, allocation and execution.
    pub fn step(&mut self) -> Result<(), MechanismError> {
        self.begin_epoch()?;
        self.check_nonempty("after update")?;
        let count = self.mgr.count(self.z);
        if count > self.peak {
            self.peak = count;
        }
        let pi = self.allocate();
        self.narrow_down(pi)?;
        self.mgr.clear_caches();
        Ok(())
    }

    fn violation(&self, detail: impl Into<String>) -> MechanismError {
        MechanismError::InvariantViolation {
            epoch: self.now,
            detail: detail.into(),
        }
    }

    fn check_nonempty(&self, what: &str) -> Result<(), MechanismError> {
        if self.z == NodeId::BOTTOM {
            Err(self.violation(format!("joint family empty {what}")))
        } else {
            Ok(())
        }
    }

    fn reveal(&mut self) -> Result<(), MechanismError> {
        let now = self.now;
        let mut fams = Vec::new();
        for i in 0..self.specs.len() {
            if self.specs[i].t_b != now || self.status[i] != Status::Unreported {
                continue;
            }
            let spec = &self.specs[i];
            let mut fam = enumerate_plans(&self.inst.net, &self.universe, spec, &mut self.mgr);
            let undiscounted = self.agent_weights(spec, spec.t_b, 1.0);
            if !worst_case_participation(&mut self.mgr, &fam, &undiscounted) {
                fam.root = self.mgr.singleton(fam.cancel);
            }
            self.families[i] = Some(fam);
            self.status[i] = Status::Active;
            fams.push(fam);
        }
        if self.cfg.variant.is_nonmyopic() {
            self.non_myopic_update(&fams);
        } else {
            self.myopic_update(&fams);
        }
        Ok(())
    }

    /// Joins each family in turn and filters the capacities it touches.
    pub fn myopic_update(&mut self, fams: &[TripPlanFamily]) {
        let per_agent = self.cfg.variant.is_per_agent();
        for fam in fams {
            self.z = self
                .book
                .join_agent(&mut self.mgr, &self.inst.net, &self.universe, self.z, fam.agent, fam.root);
            if per_agent {
                self.branch_cut();
            }
        }
        if !per_agent {
            self.branch_cut();
        }
    }

    /// Keeps forecasts that match the reports, swaps out the rest.
    pub fn non_myopic_update(&mut self, fams: &[TripPlanFamily]) {
        let now = self.now;
        let reporting: Vec<u32> = fams.iter().map(|f| f.agent).collect();
        for slot in 0..self.pending.len() {
            if let Some((_, t_b)) = self.pending[slot] {
                if t_b <= now && !reporting.contains(&(slot as u32)) {
                    self.remove_slot(slot as u32);
                }
            }
        }
        let mut unexpected = Vec::new();
        for fam in fams {
            match self.pending[fam.agent as usize].take() {
                Some((forecast, _)) if forecast.root == fam.root => {}
                Some(_) => {
                    self.remove_slot(fam.agent);
                    unexpected.push(*fam);
                }
                None => unexpected.push(*fam),
            }
        }
        self.myopic_update(&unexpected);
    }

    fn remove_slot(&mut self, slot: u32) {
        let u = self.universe;
        self.z = self.mgr.abstract_vars(self.z, |v| u.agent_of(v) == slot);
        self.book.remove_agent(slot);
        self.pending[slot as usize] = None;
    }

    fn agent_weights(&self, spec: &AgentSpec, now: u32, beta: f64) -> WeightMap {
        let mut w = WeightMap::with_len(self.universe.len());
        add_reward_weights(&mut w, spec, &self.inst.net, &self.universe, now, beta);
        w
    }

    /// Discounted weights of every reported, uncancelled agent.
    pub fn realized_weights(&self) -> WeightMap {
        let mut w = WeightMap::with_len(self.universe.len());
        for (i, spec) in self.specs.iter().enumerate() {
            if self.status[i] == Status::Active {
                add_reward_weights(&mut w, spec, &self.inst.net, &self.universe, self.now, self.cfg.beta);
            }
        }
        w
    }

    fn pending_forecasts(&self) -> Vec<u32> {
        (0..self.pending.len() as u32)
            .filter(|&s| self.pending[s as usize].is_some())
            .collect()
    }

    fn cut_weights(&self) -> WeightMap {
        let mut w = self.realized_weights();
        for slot in self.pending_forecasts() {
            let spec = self.demand.get(slot).expect("forecast slot").mean_spec();
            add_reward_weights(&mut w, &spec, &self.inst.net, &self.universe, self.now, self.cfg.beta);
        }
        w
    }

    /// Keeps the `max_branch` best joint plans under the current weights.
    pub fn branch_cut(&mut self) {
        let Some(n) = self.cfg.max_branch else { return };
        if self.mgr.count(self.z) <= BigUint::from(n) {
            return;
        }
        let w = self.cut_weights();
        let top = self.mgr.top_k_members(self.z, &w, n);
        let members: Vec<Vec<VarId>> = top.into_iter().map(|m| m.vars).collect();
        self.z = self.mgr.build_family(&members);
    }

    /// Weight maps the allocation scores against: one per sampled scenario,
    /// or just the realized weights when nothing is forecast.
    fn scenario_weights(&mut self) -> Vec<WeightMap> {
        let base = self.realized_weights();
        let forecasts = self.pending_forecasts();
        if !self.cfg.variant.is_nonmyopic() || forecasts.is_empty() {
            return vec![base];
        }
        (0..self.cfg.samples)
            .map(|_| {
                let mut w = base.clone();
                for &slot in &forecasts {
                    let spec = self.demand.get(slot).expect("forecast slot").sampled_spec(&mut self.rng);
                    add_reward_weights(&mut w, &spec, &self.inst.net, &self.universe, self.now, self.cfg.beta);
                }
                w
            })
            .collect()
    }

    fn deciding_agents(&self) -> Vec<u32> {
        let mut out: Vec<u32> = (0..self.specs.len() as u32)
            .filter(|&i| {
                let s = &self.specs[i as usize];
                self.status[i as usize] == Status::Active
                    && s.t_b <= self.now
                    && self.now < s.t_e
                    && matches!(self.states[i as usize].position, Position::AtNode(_))
            })
            .collect();
        out.sort_by_key(|&i| (self.specs[i as usize].t_b, i));
        out
    }

    fn candidates(&self, agent: u32) -> Vec<VarId> {
        let mut st = self.states[agent as usize];
        st.time = self.now;
        let mut out: Vec<VarId> = feasible_actions(&self.inst.net, &st)
            .into_iter()
            .map(|a| self.universe.encode(a))
            .collect();
        if self.specs[agent as usize].t_b == self.now {
            out.push(self.universe.encode(ActionVar::new(agent, self.now, ActionKind::Cancel)));
        }
        out
    }

    /// The joint action this variant picks for the current epoch.
    pub fn allocate(&mut self) -> Vec<VarId> {
        match self.cfg.variant {
            Variant::MyopicExact => self.myopic_optimal_allocation(),
            Variant::MyopicPerAgent | Variant::NonmyopicPerAgent => {
                let scen = self.scenario_weights();
                self.per_agent_allocation(&scen)
            }
            Variant::NonmyopicExact => {
                let scen = self.scenario_weights();
                self.non_myopic_search(&scen)
            }
            Variant::Fcfs | Variant::Offline => unreachable!("rejected in new()"),
        }
    }

    /// Epoch slice of the heaviest joint plan.
    pub fn myopic_optimal_allocation(&self) -> Vec<VarId> {
        let w = self.realized_weights();
        let best = self.mgr.max_weight_member(self.z, &w).expect("non-empty joint family");
        best.vars
            .into_iter()
            .filter(|&v| self.universe.time_of(v) == self.now)
            .collect()
    }

    /// Scores every feasible joint action by its best completion summed over
    /// the scenarios. Ties go to the action whose first-scenario completion
    /// comes first canonically.
    pub fn non_myopic_allocation(&mut self, scen: &[WeightMap]) -> Vec<VarId> {
        let now_vars = self.universe.epoch_vars(self.now);
        let projected = self.mgr.project_onto(self.z, &now_vars);
        let gamma = self.mgr.enumerate_members(projected, usize::MAX);
        if gamma.len() == 1 {
            return gamma.into_iter().next().expect("one action");
        }
        let mut oracles: Vec<MaxWeightOracle<'_, WeightMap>> = scen.iter().map(MaxWeightOracle::new).collect();
        let mut best: Option<(f64, usize, Option<Vec<VarId>>)> = None;
        for (k, a) in gamma.iter().enumerate() {
            let Some(q) = score(&mut oracles, &self.mgr, self.z, a) else {
                continue;
            };
            best = Some(pick(best, q, k, |idx| {
                oracles[0]
                    .best_member_containing(&self.mgr, self.z, &gamma[idx])
                    .expect("scored action")
                    .vars
            }));
        }
        let (_, k, _) = best.expect("some feasible joint action");
        gamma[k].clone()
    }

    /// The choice of [`Self::non_myopic_allocation`] without listing every joint
    /// action: depth-first over the deciding agents, pruning partial actions
    /// whose summed best completion already falls below the incumbent.
    pub fn non_myopic_search(&mut self, scen: &[WeightMap]) -> Vec<VarId> {
        let agents = self.deciding_agents();
        let cands: Vec<Vec<VarId>> = agents.iter().map(|&a| self.candidates(a)).collect();
        let mut search = Search {
            mgr: &self.mgr,
            z: self.z,
            cands: &cands,
            oracles: scen.iter().map(MaxWeightOracle::new).collect(),
            best: None,
        };
        let mut partial = Vec::with_capacity(cands.len());
        if cands.is_empty() {
            return partial;
        }
        search.descend(&mut partial);
        search.best.expect("some feasible joint action").action
    }

    /// Fixes one agent at a time, in report order, against the scenario weights.
    pub fn per_agent_allocation(&mut self, scen: &[WeightMap]) -> Vec<VarId> {
        let mut oracles: Vec<MaxWeightOracle<'_, WeightMap>> = scen.iter().map(MaxWeightOracle::new).collect();
        let mut pi = Vec::new();
        for agent in self.deciding_agents() {
            let cands = self.candidates(agent);
            let mut best: Option<(f64, usize, Option<Vec<VarId>>)> = None;
            for (k, &a) in cands.iter().enumerate() {
                let Some(q) = score(&mut oracles, &self.mgr, self.z, &[a]) else {
                    continue;
                };
                let (mgr, z) = (&self.mgr, self.z);
                best = Some(pick(best, q, k, |idx| {
                    oracles[0]
                        .best_member_containing(mgr, z, &[cands[idx]])
                        .expect("scored action")
                        .vars
                }));
            }
            let (_, k, _) = best.expect("every agent has an action in the joint family");
            let a = cands[k];
            self.z = self.mgr.restrict(self.z, a, RestrictMode::Contains);
            pi.push(a);
        }
        pi
    }

    /// Executes `pi` and keeps only joint plans that contain it.
    pub fn narrow_down(&mut self, mut pi: Vec<VarId>) -> Result<(), MechanismError> {
        pi.sort_unstable();
        let decoded: Vec<ActionVar> = pi.iter().map(|&v| self.universe.decode(v)).collect();
        for a in &decoded {
            if a.time != self.now {
                return Err(self.violation(format!("action {a} is not for this epoch")));
            }
        }
        self.z = self.mgr.restrict_all(self.z, &pi);
        self.check_nonempty("after narrowing")?;
        let mut actions = Vec::new();
        for i in 0..self.specs.len() {
            let spec = &self.specs[i];
            if self.status[i] != Status::Active || self.now < spec.t_b || self.now >= spec.t_e {
                continue;
            }
            let mine: Vec<&ActionVar> = decoded.iter().filter(|a| a.agent == i as u32).collect();
            let st = self.states[i];
            let action = match (st.position, mine.as_slice()) {
                (Position::AtNode(_), [a]) => Some(**a),
                (Position::MidEdge { .. }, []) => None,
                _ => return Err(self.violation(format!("agent {i} got {} actions in state {:?}", mine.len(), st.position))),
            };
            self.states[i] = advance(&self.inst.net, &st, action.map(|a| a.kind));
            if let Some(a) = action {
                self.executed[i].push(self.universe.encode(a));
                if a.kind == ActionKind::Cancel {
                    self.status[i] = Status::Cancelled;
                    self.trace.events.push(TraceEvent {
                        epoch: self.now,
                        agent: i as u32,
                        kind: EventKind::Rejected,
                    });
                } else if self.now == spec.t_b {
                    self.trace.events.push(TraceEvent {
                        epoch: self.now,
                        agent: i as u32,
                        kind: EventKind::Accepted,
                    });
                }
                actions.push(a);
            }
        }
        if actions.len() != decoded.len() {
            return Err(self.violation("allocation names an agent that is not deciding"));
        }
        self.trace.actions[self.now as usize] = actions;
        self.now += 1;
        Ok(())
    }

    fn process_type_changes(&mut self) -> Result<(), MechanismError> {
        let prev = (self.now - 1) as usize;
        for k in 0..self.inst.changes.len() {
            let c = &self.inst.changes[k];
            let i = c.agent as usize;
            if self.fired[k] || self.status[i] != Status::Active {
                continue;
            }
            if !self.trace.actions[prev].iter().any(|a| c.triggers_on(a)) {
                continue;
            }
            self.fired[k] = true;
            if self.now >= self.specs[i].t_e {
                continue;
            }
            let new_spec = changed_spec(&self.specs[i], c);
            self.handle_type_change(c.agent, TypeChangeRequest::NewType(new_spec))?;
        }
        Ok(())
    }

    /// Applies a mid-trip change of type if every other agent's guarantee can
    /// be kept. Returns whether it was accepted.
    pub fn handle_type_change(&mut self, agent: u32, req: TypeChangeRequest) -> Result<bool, MechanismError> {
        let i = agent as usize;
        if self.status[i] != Status::Active {
            return Err(self.violation(format!("type change for agent {agent} which is not travelling")));
        }
        let u = self.universe;
        let now = self.now;
        let new_spec = match req {
            TypeChangeRequest::Drop => {
                self.z = self
                    .mgr
                    .abstract_vars(self.z, |v| u.agent_of(v) == agent && u.time_of(v) >= now);
                self.status[i] = Status::Dropped;
                self.trace.events.push(TraceEvent {
                    epoch: now,
                    agent,
                    kind: EventKind::Dropped,
                });
                return Ok(true);
            }
            TypeChangeRequest::NewType(spec) => spec,
        };
        let mut executed = self.executed[i].clone();
        executed.sort_unstable();
        let old_spec = &self.specs[i];
        let new_full = enumerate_plans(&self.inst.net, &u, &new_spec, &mut self.mgr);
        let new_fam = self.mgr.restrict_all(new_full.root, &executed);
        let old_root = self.families[i].expect("reported agent").root;
        let old = self.mgr.restrict_all(old_root, &executed);
        let pad: Vec<VarId> = (old_spec.t_e..new_spec.t_e)
            .map(|t| u.encode(ActionVar::new(agent, t, ActionKind::Stay(old_spec.destination))))
            .collect();
        let padded = if pad.is_empty() {
            old
        } else {
            let tail = self.mgr.single_member(&pad);
            self.mgr.join(old, tail)
        };
        let relaxed = self.mgr.difference(padded, new_fam) == NodeId::BOTTOM;
        let others = self.mgr.abstract_vars(self.z, |v| u.agent_of(v) == agent);
        let rebuilt = self
            .book
            .join_agent(&mut self.mgr, &self.inst.net, &u, others, agent, new_fam);
        let accepted = relaxed || rebuilt != NodeId::BOTTOM;
        if accepted {
            if rebuilt == NodeId::BOTTOM {
                return Err(self.violation(format!("relaxed type of agent {agent} left no joint plan")));
            }
            self.z = rebuilt;
            self.specs[i] = new_spec;
            self.families[i] = Some(new_full);
            self.branch_cut();
        }
        self.trace.events.push(TraceEvent {
            epoch: now,
            agent,
            kind: if accepted {
                EventKind::TypeChangeAccepted
            } else {
                EventKind::TypeChangeKept
            },
        });
        Ok(accepted)
    }

    /// Reports the agents due now and joins them into the family.
    pub fn begin_epoch(&mut self) -> Result<(), MechanismError> {
        if self.now > 0 {
            self.process_type_changes()?;
        }
        self.reveal()
    }
}

fn sorted_forecast(demand: &DemandModel) -> Vec<&super::AnticipatedAgent> {
    let mut v: Vec<_> = demand.agents.iter().collect();
    v.sort_by_key(|a| (a.spec.t_b, a.spec.id));
    v
}

/// Sum over scenarios of the best completion containing `required`.
fn score(oracles: &mut [MaxWeightOracle<'_, WeightMap>], mgr: &Manager, z: NodeId, required: &[VarId]) -> Option<f64> {
    let mut total = 0.0;
    for o in oracles.iter_mut() {
        total += o.best_containing(mgr, z, required)?;
    }
    Some(total)
}

/// Keeps the better of the incumbent and candidate `k` scoring `q`; exact
/// ties compare first-scenario completions canonically.
fn pick(
    best: Option<(f64, usize, Option<Vec<VarId>>)>,
    q: f64,
    k: usize,
    mut member: impl FnMut(usize) -> Vec<VarId>,
) -> (f64, usize, Option<Vec<VarId>>) {
    match best {
        None => (q, k, None),
        Some((bq, _, _)) if q > bq => (q, k, None),
        Some((bq, bk, bm)) if q == bq => {
            let incumbent = bm.unwrap_or_else(|| member(bk));
            let challenger = member(k);
            if canonical_cmp(&challenger, &incumbent) == std::cmp::Ordering::Less {
                (q, k, Some(challenger))
            } else {
                (bq, bk, Some(incumbent))
            }
        }
        Some(b) => b,
    }
}

struct Incumbent {
    q: f64,
    action: Vec<VarId>,
    member: Option<Vec<VarId>>,
}

struct Search<'s, 'w> {
    mgr: &'s Manager,
    z: NodeId,
    cands: &'s [Vec<VarId>],
    oracles: Vec<MaxWeightOracle<'w, WeightMap>>,
    best: Option<Incumbent>,
}

impl Search<'_, '_> {
    fn member(&mut self, action: &[VarId]) -> Vec<VarId> {
        self.oracles[0]
            .best_member_containing(self.mgr, self.z, action)
            .expect("scored action")
            .vars
    }

    fn offer(&mut self, q: f64, action: &[VarId]) {
        let Some(inc) = self.best.take() else {
            self.best = Some(Incumbent { q, action: action.to_vec(), member: None });
            return;
        };
        self.best = Some(if q > inc.q {
            Incumbent { q, action: action.to_vec(), member: None }
        } else if q == inc.q {
            let incumbent = inc.member.unwrap_or_else(|| self.member(&inc.action));
            let challenger = self.member(action);
            if canonical_cmp(&challenger, &incumbent) == std::cmp::Ordering::Less {
                Incumbent { q, action: action.to_vec(), member: Some(challenger) }
            } else {
                Incumbent { member: Some(incumbent), ..inc }
            }
        } else {
            inc
        });
    }

    fn descend(&mut self, partial: &mut Vec<VarId>) {
        let depth = partial.len();
        let mut scored = Vec::new();
        for &c in &self.cands[depth] {
            partial.push(c);
            if let Some(b) = score(&mut self.oracles, self.mgr, self.z, partial) {
                scored.push((b, c));
            }
            partial.pop();
        }
        scored.sort_by(|x, y| y.0.total_cmp(&x.0));
        let leaf = depth + 1 == self.cands.len();
        for (b, c) in scored {
            if self.best.as_ref().is_some_and(|inc| b < inc.q) {
                break;
            }
            partial.push(c);
            if leaf {
                self.offer(b, partial);
            } else {
                self.descend(partial);
            }
            partial.pop();
        }
    }
}
