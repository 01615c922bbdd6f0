use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "network": {"synthetic": {"nodes": 8, "seed": 2, "segment_r_ohm": 0.03}},
  "profiles": {"step_seconds": 90},
  "fleet": {"n_placements": 2, "penetration_steps": [0.5, 1.0]}
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_feedersim"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

fn run_dir(out: &Output) -> PathBuf {
    PathBuf::from(String::from_utf8(out.stdout.clone()).unwrap().trim())
}

#[test]
fn simulate_writes_metrics_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("runs");
    let out = run(&[
        "simulate",
        cfg.to_str().unwrap(),
        "-o",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run = run_dir(&out);
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("growth_kind,penetration,placement"));
    // base case plus two penetration steps per placement and growth kind
    assert!(lines.count() >= 2);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["seed"], 1);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let ra = run(&[
        "simulate",
        cfg.to_str().unwrap(),
        "-o",
        a.to_str().unwrap(),
        "--jobs",
        "1",
    ]);
    let rb = run(&[
        "simulate",
        cfg.to_str().unwrap(),
        "-o",
        b.to_str().unwrap(),
        "--jobs",
        "2",
    ]);
    assert_eq!(ra.status.code(), Some(0));
    assert_eq!(rb.status.code(), Some(0));
    let ma = std::fs::read(run_dir(&ra).join("metrics.csv")).unwrap();
    let mb = std::fs::read(run_dir(&rb).join("metrics.csv")).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn seed_override_changes_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("runs");
    let a = run(&[
        "simulate",
        cfg.to_str().unwrap(),
        "-o",
        out_dir.to_str().unwrap(),
    ]);
    let b = run(&[
        "simulate",
        cfg.to_str().unwrap(),
        "-o",
        out_dir.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert_ne!(run_dir(&a), run_dir(&b));
}

#[test]
fn malformed_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "{ \"network\": ");
    let out = run(&[
        "simulate",
        cfg.to_str().unwrap(),
        "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config.json"));
}

#[test]
fn unknown_field_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"fleet": {"penetration": 0.5}}"#);
    let out = run(&[
        "sweep",
        cfg.to_str().unwrap(),
        "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_values_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"droop": {"v_trip": 300.0}}"#);
    let out = run(&[
        "simulate",
        cfg.to_str().unwrap(),
        "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["bogus"]).status.code(), Some(2));
    assert_eq!(run(&["simulate"]).status.code(), Some(2));
}
