use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use autosim_core::bench::check::{check_suite, CheckLevel};
use autosim_core::bench::oracle::oracle_bilevel_grad;
use autosim_core::bench::{run_experiment, ExperimentConfig};
use autosim_core::hypergrad::{hypergradient, HypergradInputs};
use autosim_core::linalg::cosine;
use autosim_core::model::{fine_tune, init_model};
use autosim_core::simgen::Simulator;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Learn simulator parameters from validation data.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Output directory (default: $AUTOSIM_OUT_DIR, then ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the self-check suite.
    Check {
        #[arg(long, value_enum, default_value = "fast")]
        level: CheckLevel,
    },
    /// Compare the finite-difference oracle with the exact-mode gradient at
    /// the config's initial parameters.
    Oracle {
        config: PathBuf,
        /// Finite-difference step on raw parameters.
        #[arg(long)]
        h: Option<f64>,
    },
}

fn oracle(config: PathBuf, h: Option<f64>) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(&config)?;
    let problem = cfg.problem()?;
    let mut oracle_cfg = cfg.oracle;
    if let Some(h) = h {
        oracle_cfg.h = h;
    }
    let psi = &problem.initial_psi;
    let reference = oracle_bilevel_grad(&problem, psi, &oracle_cfg)?;

    // a separate simulator so the comparison run is not charged to the oracle
    let sim = Simulator::new(problem.simulator.spec().clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (latents, train) = sim.generate(psi, oracle_cfg.samples, &mut rng)?;
    let theta0 = init_model(&problem.model, cfg.seed)?;
    let theta = if cfg.inner.epochs > 0 { fine_tune(&theta0, &train, &cfg.inner, &problem.model)? } else { theta0 };
    let report = hypergradient(
        &HypergradInputs {
            psi,
            theta_hat: &theta,
            latents: &latents,
            sim: sim.spec(),
            model: &problem.model,
            val_data: &problem.val_data,
        },
        &cfg.hypergrad_config(),
    )?;
    println!("psi          {:?}", psi.raw());
    println!("oracle       {reference:?}");
    println!("{:<12} {:?}", cfg.mode.as_str(), report.grad_psi);
    println!("cosine       {:.4}", cosine(&reference, &report.grad_psi));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out } => run_experiment(&config, out.as_deref())
            .with_context(|| format!("running {}", config.display()))
            .map(|o| {
                println!("metrics  {}", o.metrics_path.display());
                println!("summary  {}", o.summary_path.display());
                println!(
                    "best val loss {:.6} after {} iterations, {} samples",
                    o.summary.best_val_loss, o.summary.iterations, o.summary.cumulative_samples
                );
            }),
        Command::Check { level } => {
            let report = check_suite(level);
            println!("{report}");
            if !report.all_passed() {
                return ExitCode::FAILURE;
            }
            Ok(())
        }
        Command::Oracle { config, h } => oracle(config, h),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
