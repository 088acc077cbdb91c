//! CLI surface: exit codes and basic wiring of the shipped binary.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lanekeep"))
}

#[test]
fn help_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "gen-data",
        "train-source",
        "align-crop",
        "train-target",
        "drive-eval",
        "report",
        "grad-check",
        "full-pipeline",
    ] {
        assert!(text.contains(sub), "missing subcommand {sub} in help");
    }
}

#[test]
fn usage_errors_exit_one() {
    let out = bin().arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin()
        .args(["drive-eval", "--courses", "9"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "course out of range is usage");
}

#[test]
fn missing_artifact_exits_two() {
    let dir = std::env::temp_dir().join(format!("lanekeep-cli-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    let out = bin()
        .args(["--out", dir.to_str().unwrap(), "train-source"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gen-data"), "error names the producing stage: {err}");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn grad_check_runs_clean() {
    let out = bin().args(["grad-check", "--inputs", "1"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("max relative error"));
}

#[test]
fn config_round_trips_through_file() {
    let dir = std::env::temp_dir().join(format!("lanekeep-cli-cfg-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = lanekeep_core::pipeline::RunConfig::default();
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    let loaded = lanekeep_core::pipeline::RunConfig::load(&path).unwrap();
    assert_eq!(loaded.hash(), cfg.hash());
    let _ = std::fs::remove_dir_all(&dir);
}
