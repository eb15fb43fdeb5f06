use std::path::Path;
use std::process::{Command, Output};

use sdelab::report::{ExperimentReport, REQUIRED_IDS};
use sdelab::scenario::shipped;

fn sdelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdelab")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The reference scenario at a budget small enough for a quick run.
fn small_reference(dir: &Path) -> String {
    let text = shipped("capped-singularity-1d")
        .unwrap()
        .replace("paths = 10000\nnum_steps = 200", "paths = 2000\nnum_steps = 100")
        .replace("paths = 10000\nnum_steps = 5000", "paths = 500\nnum_steps = 500")
        .replace("long_paths = 2000", "long_paths = 300")
        .replace("ito_paths = 2000", "ito_paths = 300")
        .replace("bilipschitz_pairs = 1000", "bilipschitz_pairs = 100")
        .replace("conditional_paths = 1000", "conditional_paths = 100");
    let path = dir.join("small.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn list_names_every_shipped_scenario() {
    let o = sdelab(&["list"]);
    assert!(o.status.success());
    let out = stdout(&o);
    for name in ["zero-drift", "capped-singularity-1d", "capped-singularity-bump-1d"] {
        assert!(out.contains(name), "{out}");
    }
}

#[test]
fn small_p_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, shipped("zero-drift").unwrap().replace("p = 4.0", "p = 0.5")).unwrap();
    let o = sdelab(&["verify", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("p must exceed 1"), "{}", stderr(&o));
}

#[test]
fn unknown_format_and_missing_config_exit_2() {
    let o = sdelab(&["norm", "--config", "zero-drift", "--format", "yaml"]);
    assert_eq!(o.status.code(), Some(2));
    let o = sdelab(&["norm", "--config", "no-such-scenario"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_drift_verifies_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = sdelab(&["verify", "--config", "zero-drift", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for id in REQUIRED_IDS {
        assert!(stdout(&o).lines().any(|l| l.starts_with(id)), "missing {id}");
    }
    let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let report = ExperimentReport::from_json(&json).unwrap();
    assert!(report.missing_ids().is_empty());
    assert!(report.all_pass());
    assert!(dir.path().join("report.csv").exists());
    assert!(dir.path().join("provenance.json").exists());
}

#[test]
fn csv_report_is_reproducible_and_seed_is_echoed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run = |dir: &Path| {
        let o = sdelab(&["report", "--config", "zero-drift", "--seed", "99", "--format", "csv", "--out", dir.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let first = run(a.path());
    assert_eq!(first, run(b.path()));
    assert!(first.contains("# seed: 99"));
    assert!(first.contains("# [monte_carlo]"));
    assert_eq!(
        std::fs::read(a.path().join("report.csv")).unwrap(),
        std::fs::read(b.path().join("report.csv")).unwrap()
    );
}

#[test]
fn hard_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_reference(dir.path());
    let out = dir.path().join("out");
    let o = sdelab(&["verify", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stderr(&o).contains("exponential_moment"), "{}", stderr(&o));
}

#[test]
fn certify_and_transform() {
    let o = sdelab(&["certify-horizon", "--config", "capped-singularity-1d", "--format", "json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let t0 = v["t0"].as_f64().unwrap();
    assert!(t0 > 0.0 && v["gradient_sum"].as_f64().unwrap() <= 0.5);
    assert_eq!(v["n_max"].as_i64(), Some(3));

    let dir = tempfile::tempdir().unwrap();
    let o = sdelab(&["transform", "--config", "capped-singularity-1d", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pipe = sdelab::transform::read_pipeline(&dir.path().join("pipeline")).unwrap();
    assert_eq!(pipe.depth(), 3);
    assert!((pipe.horizon() - t0).abs() < 1e-12);
}

#[test]
fn norm_pde_and_simulate() {
    let o = sdelab(&["norm", "--config", "capped-singularity-1d", "--format", "csv"]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("quantity,value\n"));
    assert!(stdout(&o).contains("exponent_condition,satisfied"));

    let dir = tempfile::tempdir().unwrap();
    let o = sdelab(&["pde-solve", "--config", "zero-drift", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let u = sdelab::grid::io::read_field(&dir.path().join("u.json")).unwrap();
    assert!(u.samples().iter().all(|&v| v == 0.0));

    let o = sdelab(&["simulate", "--config", "zero-drift", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let paths = std::fs::read_to_string(dir.path().join("paths.csv")).unwrap();
    assert_eq!(paths.lines().count(), 1 + 20 * 501);
}
