use std::path::Path;
use std::process::{Command, Output};

fn edgewbc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgewbc"))
        .args(args)
        .env_remove("EDGEWBC_SEED")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

#[test]
fn missing_controller_is_a_config_error() {
    let out = edgewbc(&["run", "--task", "balancing"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));
}

#[test]
fn malformed_channel_is_a_config_error() {
    let out = edgewbc(&["run", "--task", "walking", "--controller", "la", "--channel", "constant:soon"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreadable_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\"task\": 3}").unwrap();
    let out = edgewbc(&["run", "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn short_run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = edgewbc(&[
        "run", "--task", "balancing", "--controller", "la", "--channel", "constant:0.02", "--duration", "0.3", "--out",
        path(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.json", "metrics.csv", "log.csv", "discrepancy.csv"] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    let log = std::fs::read_to_string(out_dir.join("log.csv")).unwrap();
    // Header plus one row per 1 ms cycle.
    assert_eq!(log.lines().count(), 301);
}

#[test]
fn trace_gen_writes_replayable_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("traces/building.csv");
    let out = edgewbc(&["trace-gen", "--preset", "burning_building", "--duration", "0.5", "--seed", "4", "--out", path(&trace)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let channel = format!("trace:{}", path(&trace));
    let run = edgewbc(&[
        "run", "--task", "walking", "--controller", "pr", "--channel", &channel, "--duration", "0.2", "--out",
        path(&dir.path().join("run")),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
}

#[test]
fn check_passes() {
    let out = edgewbc(&["check", "--qp-instances", "50"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}
