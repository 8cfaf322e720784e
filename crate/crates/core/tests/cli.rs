use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dmd(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmd"))
        .args(args)
        .env("DMD_OUT_ROOT", out_root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.txt");
    let text = format!(
        "dataset = ring\ngen_hidden = 8,8\ndisc_hidden = 8,8,8,8,8\nsteps = 48\nbatch = 16\n\
         cadence = 8\nprobe_size = 8\nsnapshot_every = 16\nkeep_every = 16\neval_samples = 64\nseeds = 0\n{extra}"
    );
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn train_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = dmd(&["train", "--config", &cfg, "--strategy", "baseline"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["strategy"], "baseline");
    assert!(tmp.path().join("baseline/seed-0/summary.json").exists());

    let root = tmp.path().to_string_lossy().into_owned();
    let out = dmd(&["report", "--runs", &root], tmp.path());
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("| baseline"));
}

#[test]
fn overrides_reach_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out_dir = tmp.path().join("elsewhere");
    let out = dmd(
        &[
            "train", "--config", &cfg, "--seed", "7", "--lambda", "-inf", "--ratio", "0.5", "--layer", "3",
            "--out", out_dir.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["seed"], 7);
    assert_eq!(summary["ratio"], 0.5);
    assert_eq!(summary["layer"], 3);
    assert_eq!(summary["mask_fraction"], 1.0);
    assert!(out_dir.join("dmd/seed-7/summary.json").exists());
}

#[test]
fn analyze_a_finished_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    assert!(dmd(&["train", "--config", &cfg], tmp.path()).status.success());
    let run = tmp.path().join("dmd/seed-0");
    let out = dmd(&["analyze", "--run", run.to_str().unwrap()], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("analysis/drift.csv").exists());
}

#[test]
fn config_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "ratio = 1.5\n");
    let out = dmd(&["train", "--config", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ratio"));

    let cfg = write_config(tmp.path(), "");
    let out = dmd(&["train", "--config", &cfg, "--strategy", "nonsense"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_run_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dmd(&["analyze", "--run", tmp.path().join("nope").to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}
