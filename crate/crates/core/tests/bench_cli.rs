mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use autosim_core::bench::check::{check_suite, check_suite_with, CheckLevel, CheckOptions};
use autosim_core::bench::metrics::{read_metrics, COLUMNS, WALL_SECONDS_COLUMN};
use autosim_core::bench::presets::preset;
use autosim_core::bench::{run_config, run_experiment, ExperimentConfig, Method, Summary};
use autosim_core::hypergrad::ApproxMode;
use autosim_core::task::TaskName;
use autosim_core::Error;
use common::median;

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

/// Metrics body with the wall-clock column removed.
fn body_without_time(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|line| {
            line.split(',')
                .enumerate()
                .filter(|(i, _)| *i != WALL_SECONDS_COLUMN)
                .map(|(_, f)| f)
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect()
}

fn short(task: TaskName, method: Method, iterations: usize, seed: u64) -> ExperimentConfig {
    let mut cfg = preset(task, method, ApproxMode::ExactQuadratic, seed);
    cfg.budget.iterations = iterations;
    cfg.budget.target_val_loss = None;
    cfg.name = None;
    cfg
}

#[test]
fn shipped_configs_load() {
    let mut n = 0;
    for entry in std::fs::read_dir(config_dir()).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.problem().unwrap();
        n += 1;
    }
    assert!(n >= 3);
}

#[test]
fn one_iteration_gives_one_row_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "single", &short(TaskName::GaussianMatch, Method::Autosimulate, 1, 0));
    let out = run_experiment(&path, Some(dir.path())).unwrap();
    let text = std::fs::read_to_string(&out.metrics_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], COLUMNS.join(","));
    assert_eq!(read_metrics(&out.metrics_path).unwrap().len(), 1);
    let summary = Summary::read(&out.summary_path).unwrap();
    assert_eq!(summary, out.summary);
    assert_eq!(summary.iterations, 1);
    assert_eq!(summary.stop_reason, "budget");
    assert!(out.metrics_path.ends_with("single.metrics.csv"));
}

#[test]
fn replay_reproduces_metrics_bodies() {
    for method in [Method::Autosimulate, Method::Lts, Method::Random] {
        let cfg = short(TaskName::SourceMixture, method, 6, 3);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let first = run_config(&cfg, "replay", a.path()).unwrap();
        let second = run_config(&cfg, "replay", b.path()).unwrap();
        let body = body_without_time(&first.metrics_path);
        assert_eq!(body.len(), 6);
        assert_eq!(body, body_without_time(&second.metrics_path), "{}", method.as_str());
    }
}

#[test]
fn ledger_matches_reported_samples_for_every_method() {
    let dir = tempfile::tempdir().unwrap();
    for method in [Method::Autosimulate, Method::Lts, Method::Random] {
        for task in [TaskName::GaussianMatch, TaskName::SourceMixture] {
            let cfg = short(task, method, 4, 1);
            let out = run_config(&cfg, &format!("{}-{}", task.as_str(), method.as_str()), dir.path()).unwrap();
            assert_eq!(out.summary.ledger_samples, out.summary.cumulative_samples);
            let rows = read_metrics(&out.metrics_path).unwrap();
            assert_eq!(rows.last().unwrap().cumulative_samples, out.summary.cumulative_samples);
            assert!(rows.windows(2).all(|w| w[1].cumulative_samples >= w[0].cumulative_samples));
            assert!(rows.windows(2).all(|w| w[1].wall_seconds >= w[0].wall_seconds));
        }
    }
}

#[test]
fn autosim_needs_no_more_samples_than_random_search() {
    let dir = tempfile::tempdir().unwrap();
    let median_samples = |method: Method| {
        median(
            (0..5)
                .map(|seed| {
                    let cfg = preset(TaskName::SourceMixture, method, ApproxMode::ExactQuadratic, seed);
                    let name = cfg.run_name("x");
                    let out = run_config(&cfg, &name, dir.path()).unwrap();
                    out.summary.samples_to_target.map_or(f64::INFINITY, |s| s as f64)
                })
                .collect(),
        )
    };
    let ours = median_samples(Method::Autosimulate);
    let random = median_samples(Method::Random);
    assert!(ours.is_finite() && ours <= random, "autosim {ours}, random {random}");
}

#[test]
fn aborted_run_still_writes_its_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short(TaskName::LocationToy, Method::Autosimulate, 5, 0);
    cfg.inner.epochs = 200;
    cfg.inner.optimizer.step_size = 40.0;
    let out = run_config(&cfg, "diverged", dir.path()).unwrap();
    assert_eq!(out.summary.stop_reason, "error");
    assert!(out.summary.error.as_deref().unwrap().contains("diverged"));
    let text = std::fs::read_to_string(&out.metrics_path).unwrap();
    assert_eq!(text.lines().next().unwrap(), COLUMNS.join(","));
    assert!(out.summary_path.exists());
}

#[test]
fn config_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(config_dir().join("gaussian-match.toml")).unwrap();
    std::fs::write(&path, text.replace("[budget]", "[budget]\nitterations = 3")).unwrap();
    let err = ExperimentConfig::load(&path).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Config(_)));
    assert!(msg.contains("itterations") && msg.contains("line") && msg.contains("bad.toml"), "{msg}");

    std::fs::write(&path, "task = \"no-such-task\"").unwrap();
    assert!(ExperimentConfig::load(&path).is_err());
}

#[test]
fn fast_checks_pass_within_a_minute() {
    let start = Instant::now();
    let report = check_suite(CheckLevel::Fast);
    assert!(report.all_passed(), "{report}");
    assert!(start.elapsed().as_secs_f64() < 60.0);
}

#[test]
fn sign_flip_is_caught_by_the_oracle_check() {
    let report = check_suite_with(CheckLevel::Fast, CheckOptions { flip_linear_sign: true });
    assert!(!report.get("oracle_agreement").unwrap().passed, "{report}");
    assert!(report.get("gradient_vs_fd").unwrap().passed);
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_autosim"))
}

#[test]
fn cli_run_honours_output_directory_precedence() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    let cfg_dir = tempfile::tempdir().unwrap();
    let path = write_config(cfg_dir.path(), "cli", &short(TaskName::LocationToy, Method::Autosimulate, 2, 0));

    let out = cli().arg("run").arg(&path).env("AUTOSIM_OUT_DIR", env_dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(env_dir.path().join("cli.metrics.csv").exists());
    assert!(env_dir.path().join("cli.summary.toml").exists());

    let out = cli()
        .arg("run")
        .arg(&path)
        .arg("--out")
        .arg(flag_dir.path())
        .env("AUTOSIM_OUT_DIR", env_dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(flag_dir.path().join("cli.metrics.csv").exists());
}

#[test]
fn cli_reports_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.toml");
    std::fs::write(&path, "task = \"location-toy\"\nbogus = 1\n").unwrap();
    let out = cli().arg("run").arg(&path).env("AUTOSIM_OUT_DIR", dir.path()).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn cli_check_and_oracle() {
    let out = cli().args(["check", "--level", "fast"]).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.contains("oracle_agreement") && stdout.contains("0 failed"));

    let out = cli().arg("oracle").arg(config_dir().join("location-toy.toml")).args(["--h", "0.01"]).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cos: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("cosine"))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(cos > 0.9, "{stdout}");
}
