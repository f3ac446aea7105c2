use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use num_bigint::BigUint;

use prism_alloc::agents::enumerate_plans;
use prism_alloc::experiment::{emit_csv, load_scenario, run_trials, sample_instance, ScenarioConfig, TrialOptions};
use prism_alloc::mechanism::{offline_optimal, social_welfare, CapacityBook, MechanismConfig, MechanismError, Variant};
use prism_alloc::network::VarUniverse;
use prism_alloc::zdd::{Manager, NodeId};

#[derive(Parser)]
#[command(name = "prism-alloc", version, about = "Capacity-constrained trip allocation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run mechanisms over repeated trials and write per-trial CSV rows.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Comma-separated mechanism names.
        #[arg(long, value_delimiter = ',', default_value = "fcfs,myopic_exact")]
        mechanism: Vec<String>,
        /// Branch limit, or `unlimited`.
        #[arg(long, default_value = "unlimited")]
        max_branch: String,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        /// Overrides the scenario's trial count.
        #[arg(long)]
        trials: Option<usize>,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Write 0 for wall time so repeated runs give identical bytes.
        #[arg(long)]
        no_timing: bool,
    },
    /// Print per-agent and joint plan counts for one sampled roster.
    Enumerate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        agent_index: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the offline optimal welfare and joint plan for one sampled roster.
    Oracle {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

enum Failure {
    Config(String),
    Invariant(String),
}

impl From<MechanismError> for Failure {
    fn from(e: MechanismError) -> Self {
        match e {
            MechanismError::Config(_) => Failure::Config(e.to_string()),
            MechanismError::InvariantViolation { .. } => Failure::Invariant(e.to_string()),
        }
    }
}

fn load(path: &PathBuf) -> Result<ScenarioConfig, Failure> {
    load_scenario(path).map_err(|e| Failure::Config(e.to_string()))
}

fn parse_branch(s: &str) -> Result<Option<usize>, Failure> {
    if s == "unlimited" {
        return Ok(None);
    }
    match s.parse::<usize>() {
        Ok(n) if n >= 1 => Ok(Some(n)),
        _ => Err(Failure::Config(format!("--max-branch expects a positive integer or `unlimited`, got {s:?}"))),
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            scenario,
            mechanism,
            max_branch,
            samples,
            trials,
            seed,
            out,
            no_timing,
        } => {
            let mut cfg = load(&scenario)?;
            cfg.trials = trials.unwrap_or(cfg.trials);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let max_branch = parse_branch(&max_branch)?;
            let mut mechanisms = Vec::new();
            for name in &mechanism {
                let variant = Variant::parse(name.trim()).ok_or_else(|| {
                    let known: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                    Failure::Config(format!("unknown mechanism {name:?}; expected one of {}", known.join(", ")))
                })?;
                if variant == Variant::Offline {
                    // every trial already reports the offline benchmark
                    continue;
                }
                let m = MechanismConfig::new(variant).with_max_branch(max_branch).with_samples(samples);
                m.validate()?;
                mechanisms.push(m);
            }
            let opts = TrialOptions {
                mechanisms,
                timing: !no_timing,
            };
            let results = run_trials(&cfg, &opts).map_err(|e| match e.source {
                MechanismError::Config(_) => Failure::Config(e.to_string()),
                MechanismError::InvariantViolation { .. } => Failure::Invariant(e.to_string()),
            })?;
            emit_csv(&results, &out).map_err(|e| Failure::Config(format!("cannot write {}: {e}", out.display())))?;
            eprintln!("wrote {} rows to {}", results.len(), out.display());
            Ok(())
        }
        Command::Enumerate {
            scenario,
            agent_index,
            seed,
        } => {
            let cfg = load(&scenario)?;
            let net = cfg.network().map_err(|e| Failure::Config(e.to_string()))?;
            let ti = sample_instance(&cfg, &net, seed.unwrap_or(cfg.seed))?;
            let inst = &ti.instance;
            if let Some(j) = agent_index {
                if j >= inst.agents.len() {
                    return Err(Failure::Config(format!(
                        "--agent-index {j} out of range for {} agents",
                        inst.agents.len()
                    )));
                }
            }
            let universe = VarUniverse::new(&net, inst.agents.len(), cfg.var_order);
            let mut mgr = Manager::new();
            let mut book = CapacityBook::new();
            let mut z = NodeId::TOP;
            for a in &inst.agents {
                let fam = enumerate_plans(&net, &universe, a, &mut mgr);
                if agent_index.map_or(true, |j| j == a.id as usize) {
                    let plans = mgr.count(fam.root) - BigUint::from(1u32);
                    println!(
                        "agent {} {}->{} t_b={} t_e={} plans={plans}",
                        a.id,
                        net.node_name(a.origin),
                        net.node_name(a.destination),
                        a.t_b,
                        a.t_e
                    );
                }
                z = book.join_agent(&mut mgr, &net, &universe, z, a.id, fam.root);
            }
            if agent_index.is_none() {
                println!("joint plans={} nodes={}", mgr.count(z), mgr.size(z));
            }
            Ok(())
        }
        Command::Oracle { scenario, seed } => {
            let cfg = load(&scenario)?;
            let net = cfg.network().map_err(|e| Failure::Config(e.to_string()))?;
            let ti = sample_instance(&cfg, &net, seed.unwrap_or(cfg.seed))?;
            let (trace, _) = offline_optimal(&ti.instance, cfg.var_order)?;
            println!("offline_sw={}", social_welfare(&trace, &ti.instance));
            for a in &ti.instance.agents {
                let plan: Vec<String> = trace.agent_actions(a.id).map(|v| v.to_string()).collect();
                println!("agent {}: {}", a.id, plan.join(" "));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Invariant(msg)) => {
            eprintln!("invariant violation: {msg}");
            ExitCode::from(2)
        }
    }
}
