mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::scenario;
use prism_alloc::experiment::{format_sig6, run_trials, write_csv, ScenarioConfig, TrialOptions, CSV_HEADER};
use prism_alloc::mechanism::{MechanismConfig, Variant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_prism-alloc"))
}

fn tiny() -> ScenarioConfig {
    let mut cfg = scenario("baseline_static.json");
    cfg.demand.n_agents = 6;
    cfg.trials = 2;
    cfg
}

fn write_scenario(dir: &Path, cfg: &ScenarioConfig) -> std::path::PathBuf {
    let path = dir.join("scenario.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

#[test]
fn run_writes_reproducible_csv() {
    let dir = tempfile::tempdir().unwrap();
    let scen = write_scenario(dir.path(), &tiny());
    let mut bytes = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("out{k}.csv"));
        let o = run(&[
            "run",
            "--scenario",
            scen.to_str().unwrap(),
            "--mechanism",
            "fcfs,myopic_per_agent,nonmyopic_exact",
            "--max-branch",
            "10",
            "--samples",
            "2",
            "--out",
            out.to_str().unwrap(),
            "--no-timing",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        bytes.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    let text = String::from_utf8(bytes.remove(0)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
    // offline plus three mechanisms, two trials
    assert_eq!(lines.count(), 8);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let scen = write_scenario(dir.path(), &tiny());
    let out = dir.path().join("o.csv");
    let (scen, out) = (scen.to_str().unwrap(), out.to_str().unwrap());

    let o = run(&["run", "--scenario", scen, "--mechanism", "lottery", "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown mechanism"));

    let o = run(&["run", "--scenario", scen, "--max-branch", "0", "--out", out]);
    assert_eq!(o.status.code(), Some(1));

    let o = run(&["run", "--scenario", "/nonexistent.json", "--out", out]);
    assert_eq!(o.status.code(), Some(1));

    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));

    let mut bad: serde_json::Value = serde_json::to_value(tiny()).unwrap();
    bad["network"]["edges"][4]["tau"] = serde_json::json!(-1);
    let path = dir.path().join("bad.json");
    std::fs::write(&path, bad.to_string()).unwrap();
    let o = run(&["run", "--scenario", path.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("network.edges B->C") && err.contains("tau"), "{err}");

    std::fs::write(&path, r#"{"horizon": 8, "colour": "red"}"#).unwrap();
    let o = run(&["oracle", "--scenario", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn enumerate_and_oracle_report() {
    let dir = tempfile::tempdir().unwrap();
    let scen = write_scenario(dir.path(), &tiny());
    let scen = scen.to_str().unwrap();
    let o = run(&["enumerate", "--scenario", scen]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("agent ")).count(), 6);
    assert!(text.lines().last().unwrap().starts_with("joint plans="));

    let o = run(&["enumerate", "--scenario", scen, "--agent-index", "2"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("agent 2 "));
    assert_eq!(run(&["enumerate", "--scenario", scen, "--agent-index", "6"]).status.code(), Some(1));

    let o = run(&["oracle", "--scenario", scen, "--seed", "4"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let sw: f64 = text.lines().next().unwrap().strip_prefix("offline_sw=").unwrap().parse().unwrap();
    assert!(sw > 0.0);
}

#[test]
fn csv_round_trip() {
    let cfg = tiny();
    let opts = TrialOptions {
        mechanisms: vec![
            MechanismConfig::new(Variant::Fcfs),
            MechanismConfig::new(Variant::MyopicExact).with_max_branch(Some(3)),
        ],
        timing: false,
    };
    let rows = run_trials(&cfg, &opts).unwrap();
    assert_eq!(rows.len(), 6);
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf).unwrap();
    let mut reader = csv::Reader::from_reader(buf.as_slice());
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), CSV_HEADER);
    for (rec, row) in reader.records().zip(&rows) {
        let rec = rec.unwrap();
        assert_eq!(rec[0].parse::<usize>().unwrap(), row.trial);
        assert_eq!(&rec[1], row.mechanism);
        let branch = row.max_branch.map_or("unlimited".to_string(), |n| n.to_string());
        assert_eq!(&rec[2], branch);
        assert_eq!(&rec[6], format_sig6(row.sw));
        let sw: f64 = rec[6].parse().unwrap();
        assert!((sw - row.sw).abs() <= 1e-5 * row.sw.abs().max(1.0));
        assert_eq!(rec[13].parse::<u64>().unwrap(), row.seed);
    }
    assert!(rows.iter().filter(|r| r.mechanism == "offline").all(|r| r.efficiency == 1.0));
}

#[test]
fn scenario_validation_messages() {
    let mut cfg = tiny();
    cfg.beta = 1.5;
    let text = serde_json::to_string(&cfg).unwrap();
    let err = ScenarioConfig::from_json(&text).unwrap_err().to_string();
    assert!(err.contains("beta"), "{err}");

    let mut cfg = tiny();
    cfg.network.edges[0].capacity = prism_alloc::experiment::CapacityConfig::Profile(vec![1, 2]);
    let err = cfg.network().unwrap_err().to_string();
    assert!(err.contains("network.edges A->B") && err.contains("profile"), "{err}");

    let mut cfg = tiny();
    cfg.demand.n_agents = 120;
    cfg.capacity_scaling = true;
    let net = cfg.network().unwrap();
    assert_eq!(cfg.capacity_factor(), 3);
    assert_eq!(net.edge(0).capacity_at(0), 3);
}
