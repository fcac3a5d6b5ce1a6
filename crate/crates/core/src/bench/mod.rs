//! Experiment harness: TOML configs, CSV metrics with a TOML summary, the
//! finite-difference oracle and the self-check suite.

pub mod check;
pub mod config;
pub mod metrics;
pub mod oracle;
pub mod presets;

use std::path::{Path, PathBuf};

pub use config::{ExperimentConfig, Method};
pub use metrics::{MetricsRow, MetricsWriter, Summary};

use crate::autosim::{AutoSimulate, StopReason};
use crate::baselines::{lts_reinforce, random_search};
use crate::error::Result;

/// Environment variable that redirects experiment output.
pub const OUT_DIR_ENV: &str = "AUTOSIM_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "runs";

/// Explicit directory first, then the environment, then `./runs`.
pub fn output_dir(explicit: Option<&Path>) -> PathBuf {
    if let Some(dir) = explicit {
        return dir.to_path_buf();
    }
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
    pub summary: Summary,
}

/// Loads a config file and runs it. Outputs are named after the config's
/// `name` or, failing that, the file stem.
pub fn run_experiment(config_path: &Path, out_dir: Option<&Path>) -> Result<ExperimentOutput> {
    let cfg = ExperimentConfig::load(config_path)?;
    let stem = config_path.file_stem().and_then(|s| s.to_str()).unwrap_or("experiment");
    let name = cfg.run_name(stem);
    run_config(&cfg, &name, &output_dir(out_dir))
}

/// Runs one configured method and writes `<name>.metrics.csv` and
/// `<name>.summary.toml` into `dir`.
pub fn run_config(cfg: &ExperimentConfig, name: &str, dir: &Path) -> Result<ExperimentOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let metrics_path = dir.join(format!("{name}.metrics.csv"));
    let summary_path = dir.join(format!("{name}.summary.toml"));
    let problem = cfg.problem()?;
    let mut writer = MetricsWriter::create(&metrics_path)?;

    let (history, final_psi, stop, error) = match cfg.method {
        Method::Autosimulate => {
            let out = AutoSimulate::new(&problem, cfg.autosim_config())?.run()?;
            (out.state.history, out.state.psi.raw().to_vec(), out.stop, out.error)
        }
        Method::Lts => {
            let run = lts_reinforce(&problem, &cfg.lts_config())?;
            (run.history, run.final_psi, run.stop, run.error)
        }
        Method::Random => {
            let run = random_search(&problem, &cfg.random_config())?;
            (run.history, run.final_psi, run.stop, run.error)
        }
    };
    for row in &history {
        writer.write(row)?;
    }

    let last = history.last();
    let target = cfg.budget.target_val_loss;
    let reached = target.and_then(|t| metrics::first_at_target(&history, t));
    let summary = Summary {
        name: name.to_string(),
        task: cfg.task.as_str().to_string(),
        method: cfg.method.as_str().to_string(),
        mode: cfg.mode.as_str().to_string(),
        seed: cfg.seed,
        iterations: history.len(),
        stop_reason: stop.as_str().to_string(),
        best_val_loss: last.map_or(f64::INFINITY, |r| r.best_val_loss),
        final_val_loss: last.map_or(f64::INFINITY, |r| r.val_loss),
        final_test_loss: last.map_or(f64::INFINITY, |r| r.test_loss),
        target_val_loss: target,
        samples_to_target: reached.map(|r| r.cumulative_samples),
        time_to_target: reached.map(|r| r.wall_seconds),
        cumulative_samples: last.map_or(0, |r| r.cumulative_samples),
        ledger_samples: problem.ledger_total(),
        wall_seconds: last.map_or(0.0, |r| r.wall_seconds),
        final_psi,
        error: error.as_ref().map(|e| e.to_string()),
    };
    debug_assert!(stop != StopReason::Error || summary.error.is_some());
    summary.write(&summary_path)?;
    Ok(ExperimentOutput { metrics_path, summary_path, summary })
}
