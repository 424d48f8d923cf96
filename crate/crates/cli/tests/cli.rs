use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use budgetopt::pipeline::demo_scenario;
use budgetopt::scenario::save_scenario;

fn budgetopt(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_budgetopt"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn demo_writes_outputs_and_prints_a_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let out = budgetopt(&["demo", "--cities", "4", "--levers", "2", "--threads", "2"], dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("uniform") && stdout.contains("optimized"), "{stdout}");
    for f in ["scenario.json", "allocation.csv", "trace.csv", "impact.csv", "comparison.csv"] {
        assert!(dir.path().join("out").join(f).exists(), "{f} missing");
    }
}

#[test]
fn fit_optimize_evaluate_flow() {
    let dir = tempfile::tempdir().unwrap();
    save_scenario(&demo_scenario(3, 2, 9), dir.path().join("s.json")).unwrap();
    for cmd in ["fit", "optimize"] {
        let out = budgetopt(&[cmd, "--scenario", "s.json"], dir.path());
        assert!(out.status.success(), "{cmd}: {}", text(&out.stderr));
    }
    let out = budgetopt(&["evaluate", "--scenario", "s.json", "--mode", "loglinear"], dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("n/a"));
    let metrics = fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert!(metrics.contains("n/a"));
}

#[test]
fn evaluate_before_optimize_says_what_to_run() {
    let dir = tempfile::tempdir().unwrap();
    save_scenario(&demo_scenario(2, 2, 3), dir.path().join("s.json")).unwrap();
    let out = budgetopt(&["evaluate", "--scenario", "s.json"], dir.path());
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("optimize"), "{}", text(&out.stderr));
}

#[test]
fn missing_oracle_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = demo_scenario(2, 2, 3);
    s.oracle = None;
    save_scenario(&s, dir.path().join("s.json")).unwrap();
    let out = budgetopt(&["fit", "--scenario", "s.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("oracle"));
}

#[test]
fn infeasible_budget_is_diagnosed() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = demo_scenario(2, 2, 3);
    s.total_budget = s.ceilings.total() * 2.0;
    save_scenario(&s, dir.path().join("s.json")).unwrap();
    let out = budgetopt(&["fit", "--scenario", "s.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("total_budget"), "{}", text(&out.stderr));
}

#[test]
fn hitting_the_iteration_cap_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    save_scenario(&demo_scenario(4, 2, 5), dir.path().join("s.json")).unwrap();
    fs::write(dir.path().join("cfg.json"), r#"{"admm": {"max_outer": 1}}"#).unwrap();
    let fit = budgetopt(&["fit", "--scenario", "s.json"], dir.path());
    assert!(fit.status.success());
    let out = budgetopt(&["optimize", "--scenario", "s.json", "--config", "cfg.json"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", text(&out.stdout));
    assert!(text(&out.stdout).contains("MaxIterations"));
}

#[test]
fn unknown_config_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), r#"{"asg_epsilon": 0.1}"#).unwrap();
    let out = budgetopt(&["demo", "--cities", "2", "--levers", "1", "--config", "cfg.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("asg_epsilon"), "{}", text(&out.stderr));
}
