//! End-to-end runs of the installed binary: the documented smoke pipeline,
//! flag validation, config-layer precedence, and error reporting.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_aerofuse")
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_metrics(path: &Path) -> Vec<(String, f64, f64, f64)> {
    let text = fs::read_to_string(path).unwrap();
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            (
                f[0].to_string(),
                f[1].parse().unwrap(),
                f[2].parse().unwrap(),
                f[3].parse().unwrap(),
            )
        })
        .collect()
}

#[test]
fn smoke_pipeline_runs_clean() {
    let dir = scratch("smoke_pipeline");
    let out = dir.to_str().unwrap();

    assert_ok(
        &run(&[
            "synth", "--kind", "smooth", "--n-lf", "400", "--n-hf", "40", "--seed", "42",
            "--out", out,
        ]),
        "synth",
    );
    let lf = dir.join("lf.csv");
    let hf = dir.join("hf.csv");
    assert_ok(
        &run(&["align", "--lf", lf.to_str().unwrap(), "--hf", hf.to_str().unwrap(), "--out", out]),
        "align",
    );
    let train_csv = dir.join("aligned/train.csv");
    assert_ok(
        &run(&[
            "train", "--data", train_csv.to_str().unwrap(), "--holdout-every", "5",
            "--window", "32", "--stride", "8", "--epochs", "3", "--out", out,
        ]),
        "train",
    );
    let model = dir.join("checkpoints/model.json");
    let pair = dir.join("aligned/pair.csv");
    assert_ok(
        &run(&[
            "infer", "--model", model.to_str().unwrap(), "--data", pair.to_str().unwrap(),
            "--out", out,
        ]),
        "infer",
    );
    let fused = dir.join("fused/fused.csv");
    assert_ok(
        &run(&[
            "evaluate", "--pred", fused.to_str().unwrap(), "--truth", pair.to_str().unwrap(),
            "--pred-col", "y_fused", "--truth-col", "y_hf", "--out", out,
        ]),
        "evaluate",
    );
    assert_ok(
        &run(&[
            "uq", "--hf", hf.to_str().unwrap(), "--fused", fused.to_str().unwrap(),
            "--out", out,
        ]),
        "uq",
    );

    let rows = read_metrics(&dir.join("reports/metrics.csv"));
    assert_eq!(rows.len(), 1);
    let (_, rmse, mae, r2) = &rows[0];
    assert!(rmse.is_finite() && mae.is_finite() && r2.is_finite());

    // Every command echoed a replayable config.
    for cmd in ["synth", "align", "train", "infer", "evaluate", "uq"] {
        assert!(dir.join(format!("reports/{cmd}_config.toml")).exists());
    }
    let summary = fs::read_to_string(dir.join("reports/uq_summary.csv")).unwrap();
    assert!(summary.lines().count() == 3, "raw and fused rows: {summary}");
}

#[test]
fn short_channel_list_is_rejected() {
    let dir = scratch("bad_channels");
    let out = dir.to_str().unwrap();
    assert_ok(
        &run(&["synth", "--kind", "smooth", "--n-lf", "40", "--n-hf", "8", "--out", out]),
        "synth",
    );
    assert_ok(
        &run(&[
            "align", "--lf", dir.join("lf.csv").to_str().unwrap(),
            "--hf", dir.join("hf.csv").to_str().unwrap(), "--out", out,
        ]),
        "align",
    );
    let res = run(&[
        "train", "--data", dir.join("aligned/train.csv").to_str().unwrap(),
        "--channels", "8,16,32", "--out", out,
    ]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("channels"), "stderr: {err}");
}

#[test]
fn evaluate_identical_tables_scores_perfectly() {
    let dir = scratch("eval_identical");
    let out = dir.to_str().unwrap();
    assert_ok(
        &run(&["synth", "--kind", "smooth", "--n-lf", "30", "--n-hf", "6", "--out", out]),
        "synth",
    );
    let lf = dir.join("lf.csv");
    assert_ok(
        &run(&[
            "evaluate", "--pred", lf.to_str().unwrap(), "--truth", lf.to_str().unwrap(),
            "--out", out,
        ]),
        "evaluate",
    );
    let rows = read_metrics(&dir.join("reports/metrics.csv"));
    assert_eq!(rows.len(), 1);
    let (name, rmse, mae, r2) = &rows[0];
    assert_eq!(name, "y");
    assert_eq!(*rmse, 0.0);
    assert_eq!(*mae, 0.0);
    assert_eq!(*r2, 1.0);
}

#[test]
fn flags_override_config_file() {
    let dir = scratch("precedence");
    let out = dir.to_str().unwrap();
    let cfg = dir.join("run.toml");
    fs::write(
        &cfg,
        "[synth]\nkind = \"smooth\"\nn_lf = 30\nn_hf = 5\nseed = 7\n",
    )
    .unwrap();
    assert_ok(
        &run(&["synth", "--config", cfg.to_str().unwrap(), "--seed", "9", "--out", out]),
        "synth",
    );
    let echo = fs::read_to_string(dir.join("reports/synth_config.toml")).unwrap();
    assert!(echo.contains("seed = 9"), "flag must win: {echo}");
    assert!(echo.contains("n_lf = 30"), "file must fill gaps: {echo}");
    let lf = fs::read_to_string(dir.join("lf.csv")).unwrap();
    assert_eq!(lf.lines().count(), 31, "header plus 30 rows");
}

#[test]
fn out_env_var_sets_default_root() {
    let dir = scratch("env_out");
    let res = Command::new(bin())
        .args(["synth", "--kind", "smooth", "--n-lf", "20", "--n-hf", "4"])
        .env("AEROFUSE_OUT", &dir)
        .output()
        .unwrap();
    assert_ok(&res, "synth under AEROFUSE_OUT");
    assert!(dir.join("lf.csv").exists());
    assert!(dir.join("reports/synth_config.toml").exists());
}

#[test]
fn missing_input_reports_one_error_line() {
    let dir = scratch("missing_input");
    let res = run(&[
        "align", "--lf", "/nonexistent/lf.csv", "--hf", "/nonexistent/hf.csv",
        "--out", dir.to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.starts_with("error: "), "stderr: {err}");
    assert_eq!(err.trim_end().lines().count(), 1, "stderr: {err}");
}
