//! Scenario files, repeated trials and CSV output.

mod config;

use std::io::Write;
use std::time::Instant;

use num_bigint::BigUint;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use rayon::prelude::*;

pub use config::{load_scenario, CapacityConfig, ConfigError, EdgeConfig, NetworkConfig, ScenarioConfig};

use crate::agents::{sample_demand, AgentKind, AgentSpec, ClassConfig, DemandConfig};
use crate::mechanism::{
    offline_optimal, run_mechanism, social_welfare, AnticipatedAgent, DemandModel, Instance, MechanismConfig,
    MechanismError, Variant,
};
use crate::network::SpaceTimeNetwork;

pub const CSV_HEADER: [&str; 14] = [
    "trial",
    "mechanism",
    "max_branch",
    "samples",
    "n_agents",
    "fraction_cruising",
    "sw",
    "offline_sw",
    "efficiency",
    "n_rejected",
    "rejection_rate",
    "log10_plan_count_peak",
    "wall_ms",
    "seed",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub mechanism: String,
    pub max_branch: Option<usize>,
    /// 0 for mechanisms that do not sample scenarios.
    pub samples: usize,
    pub n_agents: usize,
    pub fraction_cruising: f64,
    pub sw: f64,
    pub offline_sw: f64,
    pub efficiency: f64,
    pub n_rejected: usize,
    pub rejection_rate: f64,
    pub log10_plan_count_peak: f64,
    pub wall_ms: f64,
    pub seed: u64,
}

#[derive(Debug, thiserror::Error)]
#[error("trial {trial} ({mechanism}) failed, replay with --seed {seed} --trials 1: {source}")]
pub struct TrialError {
    pub trial: usize,
    pub mechanism: String,
    pub seed: u64,
    #[source]
    pub source: MechanismError,
}

/// `sw / offline_sw`, or 1 when both are 0.
pub fn efficiency(sw: f64, offline_sw: f64) -> f64 {
    if offline_sw > 0.0 {
        sw / offline_sw
    } else if sw == 0.0 {
        1.0
    } else {
        f64::INFINITY
    }
}

pub fn log10_big(n: &BigUint) -> f64 {
    let bits = n.bits();
    if bits == 0 {
        return f64::NEG_INFINITY;
    }
    let shift = bits.saturating_sub(64);
    let top = (n >> shift).iter_u64_digits().next().unwrap_or(0) as f64;
    top.log10() + shift as f64 * std::f64::consts::LOG10_2
}

/// One sampled roster with everything the mechanisms need.
pub struct TrialInstance {
    pub instance: Instance,
    pub demand: DemandModel,
    pub seed: u64,
}

pub fn sample_instance(cfg: &ScenarioConfig, net: &SpaceTimeNetwork, seed: u64) -> Result<TrialInstance, MechanismError> {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let (agents, changes) = sample_demand(&cfg.demand, net, &mut rng);
    let demand = demand_model(&cfg.demand, net, &agents);
    Ok(TrialInstance {
        instance: Instance::new(net.clone(), agents, changes)?,
        demand,
        seed,
    })
}

/// Forecast that knows every agent's constraints and its class's value
/// distributions, but not the drawn values or any change of type.
pub fn demand_model(cfg: &DemandConfig, net: &SpaceTimeNetwork, agents: &[AgentSpec]) -> DemandModel {
    let forward_origin = net.node_index(&cfg.passing_forward.origin);
    let class_of = |a: &AgentSpec| -> &ClassConfig {
        match a.kind {
            AgentKind::Cruising => &cfg.cruising,
            AgentKind::Passing if Some(a.origin) == forward_origin => &cfg.passing_forward,
            AgentKind::Passing => &cfg.passing_backward,
        }
    };
    let agents = agents
        .iter()
        .map(|a| {
            let mut values = vec![None; net.n_nodes()];
            for (name, dist) in &class_of(a).values {
                if let Some(n) = net.node_index(name) {
                    values[n] = Some(*dist);
                }
            }
            AnticipatedAgent { spec: a.clone(), values }
        })
        .collect();
    DemandModel { agents }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialOptions {
    pub mechanisms: Vec<MechanismConfig>,
    /// Record wall time; off makes the output byte-for-byte reproducible.
    pub timing: bool,
}

fn elapsed_ms(start: Instant, timing: bool) -> f64 {
    if timing {
        start.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    }
}

/// Runs one trial: the offline benchmark first, then each mechanism in turn.
pub fn run_trial(
    cfg: &ScenarioConfig,
    net: &SpaceTimeNetwork,
    opts: &TrialOptions,
    trial: usize,
) -> Result<Vec<TrialResult>, TrialError> {
    let seed = cfg.seed.wrapping_add(trial as u64);
    let fail = |mechanism: &str, source| TrialError {
        trial,
        mechanism: mechanism.to_string(),
        seed,
        source,
    };
    let ti = sample_instance(cfg, net, seed).map_err(|e| fail("sampling", e))?;
    let inst = &ti.instance;
    let n_agents = inst.agents.len();
    let row = |mechanism: &str, max_branch, samples, sw, offline_sw, n_rejected: usize, peak: &BigUint, wall_ms| TrialResult {
        trial,
        mechanism: mechanism.to_string(),
        max_branch,
        samples,
        n_agents,
        fraction_cruising: cfg.demand.fraction_cruising,
        sw,
        offline_sw,
        efficiency: efficiency(sw, offline_sw),
        n_rejected,
        rejection_rate: if n_agents == 0 { 0.0 } else { n_rejected as f64 / n_agents as f64 },
        log10_plan_count_peak: log10_big(peak),
        wall_ms,
        seed,
    };

    let start = Instant::now();
    let (trace, peak) = offline_optimal(inst, cfg.var_order).map_err(|e| fail("offline", e))?;
    let offline_sw = social_welfare(&trace, inst);
    let mut rows = vec![row(
        Variant::Offline.name(),
        None,
        0,
        offline_sw,
        offline_sw,
        trace.n_rejected(),
        &peak,
        elapsed_ms(start, opts.timing),
    )];
    for m in &opts.mechanisms {
        let m = m.clone().with_beta(cfg.beta).with_order(cfg.var_order);
        let start = Instant::now();
        let out = run_mechanism(inst, &m, Some(&ti.demand), seed).map_err(|e| fail(m.variant.name(), e))?;
        let samples = if m.variant.is_nonmyopic() { m.samples } else { 0 };
        rows.push(row(
            m.variant.name(),
            m.max_branch,
            samples,
            out.sw,
            offline_sw,
            out.n_rejected,
            &out.peak_count,
            elapsed_ms(start, opts.timing),
        ));
    }
    Ok(rows)
}

/// Trials run in parallel; rows come back trial-major in request order.
pub fn run_trials(cfg: &ScenarioConfig, opts: &TrialOptions) -> Result<Vec<TrialResult>, TrialError> {
    let net = cfg.network().map_err(|e| TrialError {
        trial: 0,
        mechanism: "setup".into(),
        seed: cfg.seed,
        source: MechanismError::Config(e.to_string()),
    })?;
    let per_trial: Vec<Vec<TrialResult>> = (0..cfg.trials)
        .into_par_iter()
        .map(|k| run_trial(cfg, &net, opts, k))
        .collect::<Result<_, _>>()?;
    Ok(per_trial.into_iter().flatten().collect())
}

/// Six significant digits, trailing zeros dropped.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let mag = x.abs().log10().floor() as i32;
    let s = if (-5..=14).contains(&mag) {
        format!("{:.*}", (5 - mag).max(0) as usize, x)
    } else {
        format!("{x:.5e}")
    };
    if s.contains('.') && !s.contains('e') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn write_csv<W: Write>(results: &[TrialResult], out: W) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in results {
        w.write_record([
            r.trial.to_string(),
            r.mechanism.clone(),
            r.max_branch.map_or_else(|| "unlimited".to_string(), |n| n.to_string()),
            r.samples.to_string(),
            r.n_agents.to_string(),
            format_sig6(r.fraction_cruising),
            format_sig6(r.sw),
            format_sig6(r.offline_sw),
            format_sig6(r.efficiency),
            r.n_rejected.to_string(),
            format_sig6(r.rejection_rate),
            format_sig6(r.log10_plan_count_peak),
            format_sig6(r.wall_ms),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(results: &[TrialResult], path: &std::path::Path) -> csv::Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(results, std::io::BufWriter::new(file))
}

/// Mean of `f` over the rows of one mechanism (and branch limit, if given).
pub fn mean_of(results: &[TrialResult], mechanism: &str, max_branch: Option<Option<usize>>, f: impl Fn(&TrialResult) -> f64) -> f64 {
    let rows: Vec<f64> = results
        .iter()
        .filter(|r| r.mechanism == mechanism && max_branch.map_or(true, |b| r.max_branch == b))
        .map(f)
        .collect();
    rows.iter().sum::<f64>() / rows.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(0.953214321), "0.953214");
        assert_eq!(format_sig6(1234.5678), "1234.57");
        assert_eq!(format_sig6(-2.5), "-2.5");
        assert_eq!(format_sig6(17.0530784), "17.0531");
        assert_eq!(format_sig6(1.5e20), "1.50000e20");
    }

    #[test]
    fn log10_of_big_counts() {
        assert_eq!(log10_big(&BigUint::from(1u32)), 0.0);
        assert!((log10_big(&BigUint::from(1000u32)) - 3.0).abs() < 1e-12);
        let big = BigUint::from(10u32).pow(40);
        assert!((log10_big(&big) - 40.0).abs() < 1e-9);
    }

    #[test]
    fn efficiency_edge_cases() {
        assert_eq!(efficiency(0.0, 0.0), 1.0);
        assert_eq!(efficiency(5.0, 10.0), 0.5);
    }
}
