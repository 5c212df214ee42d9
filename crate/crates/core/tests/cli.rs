//! End-to-end checks of the `rps-collusion` binary.

use std::path::Path;
use std::process::{Command, Output};

use collusion_core::harness::{Manifest, LOG_HEADER};

const BIN: &str = env!("CARGO_BIN_EXE_rps-collusion");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--episodes", "2", "--steps", "35", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn train_implicit_desk_writes_logs_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("logs");
    let o = small_train(&out, &["--mode", "implicit", "--scale", "desk", "--seed", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = Manifest::load(&out).unwrap();
    assert!(manifest.complete);
    assert_eq!(manifest.runs.len(), 2);
    assert_eq!(manifest.total_records, 2 * 2 * 35);
    assert_eq!(manifest.config.experiment.base_seed, 7);
    let text = std::fs::read_to_string(out.join("run_000.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), LOG_HEADER.join(","));
    assert_eq!(lines.count(), 70);
}

#[test]
fn fair_random_control_campaign() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ctl");
    let o = small_train(&out, &["--mode", "explicit", "--fair-random"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = Manifest::load(&out).unwrap();
    assert!(manifest.config.mode.fair_is_random);
    // desk scale: one control run per learning rate
    assert_eq!(manifest.runs.len(), 1);
    let text = std::fs::read_to_string(out.join("run_000.csv")).unwrap();
    let row = text.lines().nth(1).unwrap();
    assert!(row.ends_with("explicit:f0:s1r2:rand"), "{row}");
    // random seat logs epsilon 1
    assert_eq!(row.split(',').nth(13).unwrap(), "1");
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.toml");
    std::fs::write(
        &cfg,
        "[experiment]\nepisodes = 9\nlearning_rates = [0.01, 0.02]\n[agent]\nwindow = 4\nhidden = [8]\n",
    )
    .unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--episodes", "3", "--dry-run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let config = text.split("[protocol]").next().unwrap();
    let table: toml::Table = config.parse().unwrap();
    assert_eq!(table["experiment"]["episodes"].as_integer(), Some(3));
    assert_eq!(table["experiment"]["learning_rates"].as_array().unwrap().len(), 2);
    assert_eq!(table["agent"]["window"].as_integer(), Some(4));
    assert_eq!(table["agent"]["frames"].as_integer(), Some(3));
}

#[test]
fn config_errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[agent]\nwindoww = 3\n").unwrap();
    let o = run(&["train", "--config", bad.to_str().unwrap(), "--dry-run"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("windoww"), "{}", stderr(&o));

    let o = run(&["train", "--mode", "fair", "--fair-random", "--dry-run"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error"));

    let o = run(&["train", "--lr", "-1", "--dry-run"]);
    assert!(!o.status.success());

    let o = run(&["train", "--bogus-flag"]);
    assert!(!o.status.success());
}

#[test]
fn unwritable_output_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("not_a_dir");
    std::fs::write(&file, "x").unwrap();
    let o = small_train(&file.join("sub"), &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("not_a_dir"), "{}", stderr(&o));
}

#[test]
fn analyze_writes_report_and_plot_data() {
    let tmp = tempfile::tempdir().unwrap();
    let logs = tmp.path().join("logs");
    let o = small_train(&logs, &["--mode", "explicit", "--lr", "0.005,0.01", "--runs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let plots = tmp.path().join("plots");
    let report = tmp.path().join("report.txt");
    let o = run(&[
        "analyze", "--input", logs.to_str().unwrap(), "--report", report.to_str().unwrap(), "--plot-data",
        plots.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(report).unwrap();
    assert!(report.contains("run 0") && report.contains("run 1"));
    for f in ["stages.csv", "displacement.csv", "reward_distribution_lr0.005.csv", "reward_distribution_lr0.01.csv"] {
        assert!(plots.join(f).is_file(), "{f}");
    }
    let disp = std::fs::read_to_string(plots.join("displacement.csv")).unwrap();
    assert_eq!(disp.lines().count(), 1 + 2 * 2);
}

#[test]
fn analyze_empty_or_malformed_input_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let args = |input: &Path| {
        vec![
            "analyze".to_string(),
            "--input".into(),
            input.to_str().unwrap().into(),
            "--report".into(),
            tmp.path().join("r.txt").to_str().unwrap().into(),
            "--plot-data".into(),
            tmp.path().join("p").to_str().unwrap().into(),
        ]
    };
    let o = Command::new(BIN).args(args(&empty)).output().unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no step logs"));

    let bad = tmp.path().join("bad");
    std::fs::create_dir(&bad).unwrap();
    let header = LOG_HEADER.join(",");
    std::fs::write(
        bad.join("run_000.csv"),
        format!("{header}\n0,0.005,0,0,1,0,0,2,-1,-1,2,-1,-1,1,1,1,,fair\n0,0.005,0,1,7,0,0,2,-1,-1,2,-1,-1,1,1,1,,fair\n"),
    )
    .unwrap();
    let o = Command::new(BIN).args(args(&bad)).output().unwrap();
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("line 3"), "{err}");

    // rewards inconsistent with actions
    std::fs::write(bad.join("run_000.csv"), format!("{header}\n0,0.005,0,0,1,0,0,0,0,0,0,0,0,1,1,1,,fair\n")).unwrap();
    let o = Command::new(BIN).args(args(&bad)).output().unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}
