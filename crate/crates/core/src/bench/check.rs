//! Self-checks runnable from the CLI. Each check compares a component with
//! an independent reference and reports instead of panicking.

use std::fmt;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::Method;
use super::oracle::{oracle_bilevel_grad, OracleConfig};
use super::presets::preset;
use super::run_config;
use crate::autosim::AutoSimulate;
use crate::diffcore::{gradient_slice, hvp_slice, value, ParamVector};
use crate::error::Result;
use crate::hypergrad::{
    cg_solve, delta_theta, hypergradient, hypergradient_with, ApproxMode, CgConfig, DenseOperator,
    HvpOperator, HypergradConfig, HypergradInputs, TrainingHessian,
};
use crate::linalg::{cosine, dot};
use crate::model::{fine_tune, init_model, Activation, DatasetObjective, LossKind, ModelSpec, TrainConfig};
use crate::simgen::{log_prob_grad, sample_latents, DataPoint, LatentBlock, SimParams, Target};
use crate::task::{location_toy, TaskName};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CheckLevel {
    #[default]
    Fast,
    Full,
}

/// Fault injection for testing the suite itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct CheckOptions {
    /// Negates the linear-mode inner step before the oracle comparison.
    pub flip_linear_sign: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckEntry {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$}  {:<6}  {:>8}  detail", "check", "result", "seconds")?;
        for e in &self.entries {
            let result = if e.passed { "pass" } else { "FAIL" };
            writeln!(f, "{:<width$}  {:<6}  {:>8.2}  {}", e.name, result, e.seconds, e.detail)?;
        }
        let failed = self.entries.iter().filter(|e| !e.passed).count();
        write!(f, "{} checks, {} failed", self.entries.len(), failed)
    }
}

type Outcome = Result<(bool, String)>;

fn run(report: &mut CheckReport, name: &'static str, check: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let (passed, detail) = match check() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    report.entries.push(CheckEntry { name, passed, detail, seconds: start.elapsed().as_secs_f64() });
}

pub fn check_suite(level: CheckLevel) -> CheckReport {
    check_suite_with(level, CheckOptions::default())
}

pub fn check_suite_with(level: CheckLevel, opts: CheckOptions) -> CheckReport {
    let mut report = CheckReport::default();
    run(&mut report, "gradient_vs_fd", check_gradients);
    run(&mut report, "hvp_vs_fd", check_hvps);
    run(&mut report, "hvp_symmetry", check_symmetry);
    run(&mut report, "cg_vs_direct", check_cg);
    run(&mut report, "newton_step_exact", check_newton);
    run(&mut report, "score_zero_mean", check_score);
    run(&mut report, "toy_hypergradient", check_toy_hypergradient);
    run(&mut report, "identity_modes_coincide", check_identity_modes);
    run(&mut report, "oracle_agreement", || check_oracle_agreement(opts));
    if level == CheckLevel::Full {
        run(&mut report, "unbiasedness", check_unbiased);
        run(&mut report, "gaussian_match_recovery", check_recovery);
        run(&mut report, "sample_efficiency", check_efficiency);
    }
    report
}

/// `max |a - b| / max(|a|_inf, |b|_inf)`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// A random tanh network with matching random data.
fn random_problem(seed: u64) -> (ModelSpec, Vec<DataPoint>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_in = rng.random_range(1..=3);
    let hidden = rng.random_range(2..=4);
    let d_out = rng.random_range(1..=3);
    let loss = if seed.is_multiple_of(2) { LossKind::Mse } else { LossKind::CrossEntropy };
    let spec = ModelSpec::new(vec![d_in, hidden, d_out], Activation::Tanh, loss);
    let data = (0..5)
        .map(|_| {
            let input: Vec<f64> = (0..d_in).map(|_| rng.random_range(-1.5..1.5)).collect();
            let target = match loss {
                LossKind::Mse => Target::Real((0..d_out).map(|_| rng.random_range(-1.0..1.0)).collect()),
                LossKind::CrossEntropy => Target::Class(rng.random_range(0..d_out)),
            };
            DataPoint { input, target }
        })
        .collect();
    let theta = (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
    (spec, data, theta)
}

fn fd_gradient(f: &DatasetObjective<'_>, theta: &[f64], h: f64) -> Vec<f64> {
    (0..theta.len())
        .map(|i| {
            let mut p = theta.to_vec();
            let mut m = theta.to_vec();
            p[i] += h;
            m[i] -= h;
            (value(f, &p) - value(f, &m)) / (2.0 * h)
        })
        .collect()
}

fn check_gradients() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let (spec, data, theta) = random_problem(seed);
        let f = DatasetObjective::mean(&spec, &data);
        let g = gradient_slice(&f, &theta)?;
        worst = worst.max(max_rel_err(&g, &fd_gradient(&f, &theta, 1e-5)));
    }
    Ok((worst < 1e-5, format!("max rel err {worst:.2e} over 20 networks")))
}

fn check_hvps() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let (spec, data, theta) = random_problem(seed);
        let f = DatasetObjective::mean(&spec, &data);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let v: Vec<f64> = (0..theta.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hv = hvp_slice(&f, &theta, &v)?;
        let h = 1e-4;
        let shifted = |s: f64| -> Result<Vec<f64>> {
            let t: Vec<f64> = theta.iter().zip(&v).map(|(a, b)| a + s * b).collect();
            gradient_slice(&f, &t)
        };
        let (gp, gm) = (shifted(h)?, shifted(-h)?);
        let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        worst = worst.max(max_rel_err(&hv, &fd));
    }
    Ok((worst < 1e-4, format!("max rel err {worst:.2e} over 20 networks")))
}

fn check_symmetry() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let (spec, data, theta) = random_problem(seed);
        let f = DatasetObjective::mean(&spec, &data);
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let u: Vec<f64> = (0..theta.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..theta.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = dot(&u, &hvp_slice(&f, &theta, &v)?);
        let b = dot(&v, &hvp_slice(&f, &theta, &u)?);
        worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-300));
    }
    Ok((worst < 1e-8, format!("max asymmetry {worst:.2e}")))
}

/// Random SPD matrix `B'B / n + I` of size `n`.
pub fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    b.transpose() * &b / n as f64 + DMatrix::identity(n, n)
}

fn check_cg() -> Outcome {
    let mut worst = 0.0f64;
    let mut over_budget = 0;
    for seed in 0..20u64 {
        let n = 5 + (seed as usize * 7) % 46;
        let a = random_spd(n, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let direct = a.clone().cholesky().expect("SPD by construction").solve(&DVector::from_column_slice(&g));
        let dense = DenseOperator::new(n, a.transpose().iter().copied().collect())?;
        let op = HvpOperator::new(&dense, 0.0)?;
        let cfg = CgConfig { max_iters: n, rel_tolerance: 1e-12, ..CgConfig::default() };
        let step = cg_solve(&op, &g, &cfg)?;
        if step.iters_used > n {
            over_budget += 1;
        }
        worst = worst.max(max_rel_err(&step.solution, direct.as_slice()));
    }
    Ok((worst < 1e-8 && over_budget == 0, format!("max rel err {worst:.2e}, n <= 50")))
}

/// Linear regression is quadratic in its parameters, so one undamped Newton
/// step from anywhere must hit the least-squares solution.
fn check_newton() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 1 + seed as usize % 3;
        let spec = ModelSpec::linear(d, 1);
        let data: Vec<DataPoint> = (0..12)
            .map(|_| {
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                let y = rng.random_range(-1.0..1.0);
                DataPoint::regression(x, vec![y])
            })
            .collect();
        let theta = init_model(&spec, seed)?;
        let f = DatasetObjective::mean(&spec, &data);
        let g = gradient_slice(&f, theta.values())?;
        let hessian = TrainingHessian::new(&spec, &data, theta.values())?;
        let op = HvpOperator::new(&hessian, 0.0)?;
        let cfg = CgConfig { rel_tolerance: 1e-14, ..CgConfig::default() };
        let step = delta_theta(ApproxMode::ExactQuadratic, &op, &g, &cfg)?;
        let landed: Vec<f64> = theta.values().iter().zip(&step).map(|(a, b)| a + b).collect();

        // normal equations on [w, b]
        let x = DMatrix::from_fn(data.len(), d + 1, |r, c| if c < d { data[r].input[c] } else { 1.0 });
        let y = DVector::from_iterator(data.len(), data.iter().map(|p| match &p.target {
            Target::Real(v) => v[0],
            Target::Class(_) => unreachable!(),
        }));
        let xt = x.transpose();
        let exact = (&xt * &x).lu().solve(&(&xt * y)).expect("full-rank design");
        worst = worst.max(max_rel_err(&landed, exact.as_slice()));
    }
    Ok((worst <= 1e-10, format!("max distance to optimum {worst:.2e}")))
}

fn check_score() -> Outcome {
    let n = 100_000;
    let mut worst = 0.0f64;
    let cases = [
        SimParams::new(vec![LatentBlock::Gaussian { dim: 2, fixed_scale: None }], vec![0.5, -1.0, 0.3, -0.7])?,
        SimParams::new(vec![LatentBlock::Categorical { classes: 5 }], vec![0.2, -1.0, 2.0, 0.0, 0.5])?,
    ];
    for (c, psi) in cases.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(31 + c as u64);
        let latents = sample_latents(psi, n, &mut rng);
        let m = psi.dim();
        let (mut sum, mut sq) = (vec![0.0; m], vec![0.0; m]);
        for s in &latents {
            for (i, g) in log_prob_grad(psi, s)?.iter().enumerate() {
                sum[i] += g;
                sq[i] += g * g;
            }
        }
        for i in 0..m {
            let mean = sum[i] / n as f64;
            let sd = (sq[i] / n as f64 - mean * mean).max(0.0).sqrt();
            // in units of the standard error
            worst = worst.max(mean.abs() / (sd / (n as f64).sqrt()).max(1e-300));
        }
    }
    Ok((worst < 5.0, format!("largest |mean| = {worst:.2} standard errors at N={n}")))
}

/// Exact-mode estimate on the location toy at `mu = 1`, target 0, with the
/// model trained to the sample mean. Returns `(estimate, standard error)`.
pub fn toy_estimate(k: usize, seed: u64, damping: f64) -> Result<(f64, f64)> {
    let problem = location_toy(0.0, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (latents, train) = problem.simulator.generate(&problem.initial_psi, k, &mut rng)?;
    let theta0 = init_model(&problem.model, seed)?;
    let theta = fine_tune(&theta0, &train, &TrainConfig::full_batch_sgd(1, 0.5), &problem.model)?;
    let cfg = HypergradConfig { damping, ..HypergradConfig::default() };
    let report = hypergradient(
        &HypergradInputs {
            psi: &problem.initial_psi,
            theta_hat: &theta,
            latents: &latents,
            sim: problem.simulator.spec(),
            model: &problem.model,
            val_data: &problem.val_data,
        },
        &cfg,
    )?;
    let terms: Vec<f64> = latents
        .iter()
        .zip(&report.per_sample_dot)
        .map(|(s, d)| Ok(-log_prob_grad(&problem.initial_psi, s)?[0] * d))
        .collect::<Result<_>>()?;
    let mean = terms.iter().sum::<f64>() / k as f64;
    let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    Ok((report.grad_psi[0], (var / k as f64).sqrt()))
}

fn check_toy_hypergradient() -> Outcome {
    let (est, se) = toy_estimate(10_000, 7, 0.0)?;
    let err = (est - 2.0).abs();
    Ok((err <= 0.1 && err <= 3.0 * se, format!("estimate {est:.4} (analytic 2, se {se:.4})")))
}

fn check_identity_modes() -> Outcome {
    let problem = location_toy(0.0, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (latents, _) = problem.simulator.generate(&problem.initial_psi, 64, &mut rng)?;
    let theta = ParamVector::new(vec![0.3, 0.8], problem.model.layout())?;
    let inputs = HypergradInputs {
        psi: &problem.initial_psi,
        theta_hat: &theta,
        latents: &latents,
        sim: problem.simulator.spec(),
        model: &problem.model,
        val_data: &problem.val_data,
    };
    let identity = DenseOperator::identity(theta.len());
    let grad = |mode| -> Result<Vec<f64>> {
        let cfg = HypergradConfig { mode, damping: 0.0, ..HypergradConfig::default() };
        Ok(hypergradient_with(&inputs, &cfg, &identity)?.grad_psi)
    };
    let diff = max_rel_err(&grad(ApproxMode::ExactQuadratic)?, &grad(ApproxMode::Linear)?);
    Ok((diff <= 1e-10, format!("relative difference {diff:.2e}")))
}

fn check_oracle_agreement(opts: CheckOptions) -> Outcome {
    let problem = location_toy(0.0, 1.0)?;
    let psi = &problem.initial_psi;
    let oracle = oracle_bilevel_grad(&problem, psi, &OracleConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (latents, train) = problem.simulator.generate(psi, 4096, &mut rng)?;
    let theta0 = init_model(&problem.model, 17)?;
    let theta = fine_tune(&theta0, &train, &TrainConfig::full_batch_sgd(1, 0.5), &problem.model)?;
    let inputs = HypergradInputs {
        psi,
        theta_hat: &theta,
        latents: &latents,
        sim: problem.simulator.spec(),
        model: &problem.model,
        val_data: &problem.val_data,
    };
    let mut details = Vec::new();
    let mut passed = true;
    for mode in [ApproxMode::ExactQuadratic, ApproxMode::Linear] {
        let mut grad = hypergradient(&inputs, &HypergradConfig::with_mode(mode))?.grad_psi;
        if opts.flip_linear_sign && mode == ApproxMode::Linear {
            // a sign error in the inner step flips every contraction
            grad.iter_mut().for_each(|g| *g = -*g);
        }
        let cos = cosine(&grad, &oracle);
        passed &= cos > 0.9;
        details.push(format!("{mode} cos {cos:.3}"));
    }
    Ok((passed, details.join(", ")))
}

fn check_unbiased() -> Outcome {
    let estimates: Vec<f64> = (0..200).map(|s| toy_estimate(1000, 5000 + s, 0.0).map(|e| e.0)).collect::<Result<_>>()?;
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let sd = (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let se = sd / n.sqrt();
    // the finite-sample expectation is 2 (1 - 1/K) because the model is
    // fitted to the same draws
    let expected = 2.0 * (1.0 - 1.0 / 1000.0);
    Ok(((mean - expected).abs() <= 3.0 * se, format!("mean {mean:.4}, se {se:.4}, expected {expected:.4}")))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn check_recovery() -> Outcome {
    let errors: Vec<f64> = (0..5)
        .map(|seed| {
            let cfg = preset(TaskName::GaussianMatch, Method::Autosimulate, ApproxMode::ExactQuadratic, seed);
            let problem = cfg.problem()?;
            let mut sim_cfg = cfg.autosim_config();
            sim_cfg.budget.target_val_loss = None;
            let out = AutoSimulate::new(&problem, sim_cfg)?.run()?;
            if let Some(e) = out.error {
                return Err(e);
            }
            Ok((out.state.psi.raw()[0] - 2.0).abs())
        })
        .collect::<Result<_>>()?;
    let med = median(errors);
    Ok((med < 0.1, format!("median |mu - 2| = {med:.3} over 5 seeds")))
}

fn check_efficiency() -> Outcome {
    let dir = std::env::temp_dir().join(format!("autosim-check-{}", std::process::id()));
    let mut medians = Vec::new();
    for (method, mode) in [
        (Method::Autosimulate, ApproxMode::ExactQuadratic),
        (Method::Lts, ApproxMode::ExactQuadratic),
        (Method::Random, ApproxMode::ExactQuadratic),
    ] {
        let samples: Vec<f64> = (0..5)
            .map(|seed| {
                let mut cfg = preset(TaskName::SourceMixture, method, mode, seed);
                if method == Method::Random {
                    cfg.budget.iterations *= cfg.lts.candidates;
                }
                let name = cfg.run_name("check");
                let out = run_config(&cfg, &name, &dir)?;
                Ok(out.summary.samples_to_target.map_or(f64::INFINITY, |s| s as f64))
            })
            .collect::<Result<_>>()?;
        medians.push(median(samples));
    }
    let _ = std::fs::remove_dir_all(&dir);
    let (ours, lts, random) = (medians[0], medians[1], medians[2]);
    Ok((
        2.0 * ours <= lts && 2.0 * ours <= random,
        format!("median samples to target: autosim {ours}, lts {lts}, random {random}"),
    ))
}
