use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMOKE: &str = r#"{
    "problem": {"kind": "synthetic_logistic", "n": 6, "q": 8, "d": 10, "seed": 1},
    "topology": {"kind": "ring_chords", "chord_span": 1},
    "run": {"alpha": 0.05, "beta": 0.5, "iterations": 200, "clip": 1.0},
    "privacy": {"mode": "calibrate", "delta0": 1e-5},
    "sweep": {"p": [1.0, 0.8], "k_over_d": [1.0, 0.3], "epsilon": [0.5]},
    "seeds": [1, 2]
}"#;

fn dpgossip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpgossip")).args(args).output().unwrap()
}

fn write_spec(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn validate_accepts_good_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "s.json", SMOKE);
    let out = dpgossip(&["validate", &spec]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("4 sweep points x 2 seeds"));
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let empty_seeds = SMOKE.replace("\"seeds\": [1, 2]", "\"seeds\": []");
    let spec = write_spec(dir.path(), "s.json", &empty_seeds);
    for cmd in ["validate", "budget", "run"] {
        let out = dpgossip(&[cmd, &spec]);
        assert_eq!(out.status.code(), Some(1), "{cmd}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("seeds"), "{cmd}");
    }
    let missing = dpgossip(&["validate", dir.path().join("nope.json").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(1));
    let bad_eps = write_spec(dir.path(), "e.json", &SMOKE.replace("\"epsilon\": [0.5]", "\"epsilon\": [1.5]"));
    assert_eq!(dpgossip(&["validate", &bad_eps]).status.code(), Some(1));
}

#[test]
fn budget_reports_variance_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "s.json", SMOKE);
    let out = dpgossip(&["budget", &spec]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("variance ratio   0.192000"), "{text}");
    assert!(text.contains("variance ratio   1.000000"), "{text}");
}

#[test]
fn run_writes_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "s.json", SMOKE);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = dpgossip(&["run", &spec, "--out", a.to_str().unwrap(), "--workers", "1", "--stride", "50"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = dpgossip(&["run", &spec, "--out", b.to_str().unwrap(), "--workers", "3", "--stride", "50"]);
    assert_eq!(out.status.code(), Some(0));
    let agg = fs::read_to_string(a.join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 5);
    assert_eq!(agg, fs::read_to_string(b.join("aggregate.csv")).unwrap());
    let run = fs::read_to_string(a.join("runs").join("p1_kd1_eps0.5_seed1.csv")).unwrap();
    // iterations 0, 50, ..., 200
    assert_eq!(run.lines().count(), 6);
    assert!(a.join("aggregate_bounds.csv").exists());
}

#[test]
fn diverging_runs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let blow = SMOKE
        .replace("\"alpha\": 0.05", "\"alpha\": 1e300")
        .replace("\"mode\": \"calibrate\", \"delta0\": 1e-5", "\"mode\": \"fixed\", \"sigma\": 1e300");
    let spec = write_spec(dir.path(), "s.json", &blow);
    let out = dpgossip(&["run", &spec, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("8 of 8 runs failed"));
}

#[test]
fn zero_workers_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "s.json", SMOKE);
    assert_eq!(dpgossip(&["run", &spec, "--workers", "0"]).status.code(), Some(1));
}

#[test]
fn missing_output_dir_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "s.json", SMOKE);
    let out = dpgossip(&["run", &spec]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("output"));
}
