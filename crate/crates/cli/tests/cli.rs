use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use autobid_core::coldstart::{solve_lambda0_multi, PlacementPriors};
use serde_json::{json, Value};

fn autobid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autobid")).args(args).output().unwrap()
}

fn stationary() -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/stationary.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_scenario(dir: &Path, name: &str, s: &Value) -> PathBuf {
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(s).unwrap()).unwrap();
    path
}

fn run(scenario: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--scenario", scenario.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    autobid(&args)
}

fn key_values(path: &Path) -> HashMap<String, String> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].to_string())
        })
        .collect()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_one_trace_row_per_opportunity() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = stationary();
    s["horizon"] = json!(50);
    s["constraints"]["budget"] = json!(1500.0);
    let out = dir.path().join("run");
    let o = run(&write_scenario(dir.path(), "s", &s), &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = stdout(&o);
    for field in ["spend=", "results=", "cost_per_result=", "utilization="] {
        assert!(summary.contains(field), "{summary}");
    }
    let metrics = key_values(&out.join("metrics.csv"));
    let opportunities: usize = metrics["opportunities"].parse().unwrap();
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), opportunities + 1);
    assert!(out.join("resolved_config.json").exists());
}

#[test]
fn overlapping_windows_are_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = stationary();
    s["constraints"]["delivery_windows"] = json!([
        {"name": "morning", "intervals": {"start": 10, "end": 40}, "cap": 100.0},
        {"name": "noon", "intervals": {"start": 30, "end": 60}, "cap": 100.0},
    ]);
    let o = run(&write_scenario(dir.path(), "s", &s), &dir.path().join("run"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("morning") && err.contains("noon"), "{err}");
}

#[test]
fn existing_output_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = stationary();
    s["horizon"] = json!(20);
    s["constraints"]["budget"] = json!(600.0);
    let path = write_scenario(dir.path(), "s", &s);
    let out = dir.path().join("run");
    assert!(run(&path, &out, &[]).status.success());
    assert_eq!(run(&path, &out, &[]).status.code(), Some(2));
    assert!(run(&path, &out, &["--force"]).status.success());
}

#[test]
fn compare_rejects_a_foreign_trace() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = stationary();
    s["horizon"] = json!(20);
    s["constraints"]["budget"] = json!(600.0);
    let out = dir.path().join("run");
    assert!(run(&write_scenario(dir.path(), "s", &s), &out, &[]).status.success());
    let trace = out.join("trace.csv");
    let text = std::fs::read_to_string(&trace).unwrap();
    std::fs::write(&trace, text.replacen("lambda_tilde", "lambda", 1)).unwrap();
    let o = autobid(&["compare", "--run", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

fn compare_report(s: &Value) -> HashMap<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&write_scenario(dir.path(), "s", s), &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = autobid(&["compare", "--run", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    key_values(&out.join("compare.csv"))
}

fn ratio(report: &HashMap<String, String>, key: &str) -> f64 {
    report[key].parse().unwrap()
}

#[test]
fn frozen_high_multiplier_underspends() {
    let mut s = stationary();
    s["horizon"] = json!(100);
    s["constraints"]["budget"] = json!(3000.0);
    let star = ratio(&compare_report(&s), "lambda_star");

    s["agent"]["init"] = json!({"lambda0": star});
    let at_star = compare_report(&s);
    assert!(ratio(&at_star, "value_ratio") >= 0.95, "{at_star:?}");

    s["agent"]["init"] = json!({"lambda0": 100.0 * star});
    s["agent"]["xi"] = json!(1e-12);
    let frozen = compare_report(&s);
    assert!(ratio(&frozen, "value_ratio") < 0.5, "{frozen:?}");
    assert!(ratio(&frozen, "agent_spend") < 0.5 * 3000.0, "{frozen:?}");
}

#[test]
fn unconstrained_budget_is_reported() {
    let mut s = stationary();
    s["horizon"] = json!(20);
    s["constraints"]["budget"] = json!(1e7);
    assert_eq!(compare_report(&s)["oracle_status"], "unconstrained");
}

#[test]
fn coldstart_worked_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cs");
    #[rustfmt::skip]
    let o = autobid(&[
        "coldstart", "--mu", "0", "--sigma", "1", "--mu-prime", "0", "--sigma-prime", "1",
        "--budget", "0.824361", "--opportunities", "1", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("lambda*=0.367879"), "{}", stdout(&o));
    assert!(out.join("coldstart_grid.csv").exists());
}

#[test]
fn coldstart_flags_unconstrained_budget() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cs");
    #[rustfmt::skip]
    let o = autobid(&[
        "coldstart", "--mu", "0", "--sigma", "1", "--mu-prime", "0", "--sigma-prime", "1",
        "--budget", "1000", "--opportunities", "10", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("unconstrained"), "{}", stdout(&o));
}

#[test]
fn coldstart_warns_on_degenerate_samples() {
    let dir = tempfile::tempdir().unwrap();
    let bids = dir.path().join("bids.txt");
    let values = dir.path().join("values.txt");
    std::fs::write(&bids, "1.5\n1.5\n1.5\n1.5\n").unwrap();
    std::fs::write(&values, "0.5\n1.0\n2.0\n4.0\n").unwrap();
    let out = dir.path().join("cs");
    #[rustfmt::skip]
    let o = autobid(&[
        "coldstart", "--bids", bids.to_str().unwrap(), "--values", values.to_str().unwrap(),
        "--budget", "50", "--opportunities", "100", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("sigma floored"), "{}", stderr(&o));
}

#[test]
fn coldstart_multi_placement_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let priors = vec![
        PlacementPriors::new(0.0, 1.0, 0.0, 1.0, 600.0).unwrap(),
        PlacementPriors::new(-0.5, 0.7, 0.3, 0.8, 400.0).unwrap(),
    ];
    let path = dir.path().join("priors.json");
    std::fs::write(&path, serde_json::to_string(&priors).unwrap()).unwrap();
    let out = dir.path().join("cs");
    #[rustfmt::skip]
    let o = autobid(&[
        "coldstart", "--priors", path.to_str().unwrap(), "--budget", "300", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let printed: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("lambda*="))
        .and_then(|v| v.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    let expected = solve_lambda0_multi(&priors, 300.0).unwrap().lambda;
    assert!((printed / expected - 1.0).abs() < 1e-5, "{printed} vs {expected}");
}

#[test]
fn sweep_isolates_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = stationary();
    s["horizon"] = json!(20);
    s["constraints"]["budget"] = json!(600.0);
    let path = write_scenario(dir.path(), "s", &s);
    let out = dir.path().join("sweep");
    #[rustfmt::skip]
    let o = autobid(&[
        "sweep", "--scenario", path.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--seed", "5", "--sweep-seeds", "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let traces: Vec<Vec<u8>> = (5..8)
        .map(|seed| std::fs::read(out.join(format!("seed_{seed}/trace.csv"))).unwrap())
        .collect();
    assert!(traces[0] != traces[1] && traces[1] != traces[2]);
    assert!(out.join("sweep.csv").exists());

    // Same seed through `run` reproduces the sweep member.
    let single = dir.path().join("single");
    assert!(run(&path, &single, &["--seed", "6"]).status.success());
    assert_eq!(std::fs::read(single.join("trace.csv")).unwrap(), traces[1]);
}
