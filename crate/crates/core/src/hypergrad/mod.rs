//! Gradient of the validation loss with respect to simulator parameters.
//!
//! The trained parameters are assumed to move by one Newton step when the
//! simulator parameters change, `dtheta = -(H + lambda I)^-1 g_train`. Taking
//! the first-order change of the validation loss under that step and pushing
//! `d/dpsi E[g_train]` through the score function gives
//!
//! ```text
//! grad_psi = -1/K sum_k score(s_k) <g_k, w>,   w = (H + lambda I)^-1 g_val
//! ```
//!
//! where `g_k` is the parameter gradient on the k-th rendered sample. The
//! cheaper [`ApproxMode`]s replace `w` by `(H + lambda I) g_val`, by `g_val`,
//! or drop validation altogether. Descending `grad_psi` lowers the local
//! model of the validation loss. The dependence of `H` itself on `psi` is
//! not differentiated.

mod cg;
mod operator;

pub use cg::{cg_solve, CgConfig, NegativeCurvaturePolicy, NewtonStep};
pub use operator::{DenseOperator, HvpOperator, LinearOperator, TrainingHessian};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{gradient_slice, ParamVector};
use crate::error::{invalid, Error, Result};
use crate::linalg::{norm, scale};
use crate::model::{DatasetObjective, ModelSpec};
use crate::simgen::{log_prob_grad, render, render_all, DataPoint, LatentSample, SimParams, SimulatorSpec};

pub const DEFAULT_DAMPING: f64 = 1e-2;

/// Which local model of the inner solution is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApproxMode {
    /// One exact Newton step, solved with CG.
    #[default]
    ExactQuadratic,
    /// Multiplies by the damped Hessian instead of inverting it.
    ApproxQuadratic,
    /// Plain gradient step on the inner problem.
    Linear,
    /// Ignores the validation set.
    NoVal,
}

impl ApproxMode {
    pub const ALL: [ApproxMode; 4] = [
        ApproxMode::ExactQuadratic,
        ApproxMode::ApproxQuadratic,
        ApproxMode::Linear,
        ApproxMode::NoVal,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ApproxMode::ExactQuadratic => "exact_quadratic",
            ApproxMode::ApproxQuadratic => "approx_quadratic",
            ApproxMode::Linear => "linear",
            ApproxMode::NoVal => "no_val",
        }
    }
}

impl std::fmt::Display for ApproxMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypergradConfig {
    #[serde(default)]
    pub mode: ApproxMode,
    #[serde(default)]
    pub cg: CgConfig,
    #[serde(default = "default_damping")]
    pub damping: f64,
}

fn default_damping() -> f64 {
    DEFAULT_DAMPING
}

impl Default for HypergradConfig {
    fn default() -> Self {
        Self {
            mode: ApproxMode::ExactQuadratic,
            cg: CgConfig::default(),
            damping: DEFAULT_DAMPING,
        }
    }
}

impl HypergradConfig {
    pub fn with_mode(mode: ApproxMode) -> Self {
        Self { mode, ..Self::default() }
    }
}

/// Everything the outer gradient is computed from at one iterate.
pub struct HypergradInputs<'a> {
    pub psi: &'a SimParams,
    pub theta_hat: &'a ParamVector,
    pub latents: &'a [LatentSample],
    pub sim: &'a SimulatorSpec,
    pub model: &'a ModelSpec,
    pub val_data: &'a [DataPoint],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypergradReport {
    pub grad_psi: Vec<f64>,
    /// Contraction vector `w` (`(H + lambda I)^-1 g_val` in the exact mode).
    pub v_psi: Vec<f64>,
    pub g_val: Vec<f64>,
    /// `<g_k, w>` per latent sample.
    pub per_sample_dot: Vec<f64>,
    pub per_sample_grad_norm: Vec<f64>,
    pub mode: ApproxMode,
    pub cg: Option<NewtonStep>,
}

impl HypergradReport {
    pub fn cg_iters(&self) -> usize {
        self.cg.as_ref().map_or(0, |s| s.iters_used)
    }
}

/// Gradient of the summed validation loss at `theta_hat`.
pub fn val_gradient(theta_hat: &ParamVector, val_data: &[DataPoint], spec: &ModelSpec) -> Result<Vec<f64>> {
    if val_data.is_empty() {
        return Err(invalid("empty validation set"));
    }
    spec.check_data(val_data)?;
    gradient_slice(&DatasetObjective::sum(spec, val_data), theta_hat.values())
}

/// One parameter gradient per rendered latent sample.
pub fn per_sample_train_grads(
    theta_hat: &ParamVector,
    latents: &[LatentSample],
    sim: &SimulatorSpec,
    spec: &ModelSpec,
) -> Result<Vec<Vec<f64>>> {
    if latents.is_empty() {
        return Err(invalid("no latent samples"));
    }
    latents
        .par_iter()
        .map(|s| {
            let point = [render(s, sim)?];
            spec.check_data(&point)?;
            gradient_slice(&DatasetObjective::mean(spec, &point), theta_hat.values())
        })
        .collect()
}

/// The inner-solution change `dtheta` each mode assumes for a training
/// gradient `g_train`.
pub fn delta_theta(mode: ApproxMode, op: &HvpOperator<'_>, g_train: &[f64], cfg: &CgConfig) -> Result<Vec<f64>> {
    if g_train.len() != op.dim() {
        return Err(invalid("gradient and operator dimensions differ"));
    }
    Ok(match mode {
        ApproxMode::ExactQuadratic => scale(-1.0, &cg_solve(op, g_train, cfg)?.solution),
        ApproxMode::ApproxQuadratic => scale(-1.0, &op.apply(g_train)?),
        ApproxMode::Linear => scale(-1.0, g_train),
        ApproxMode::NoVal => vec![1.0; g_train.len()],
    })
}

/// The vector that per-sample gradients are contracted with. `mask` marks
/// trainable coordinates.
pub fn contraction(
    mode: ApproxMode,
    op: &HvpOperator<'_>,
    g_val: &[f64],
    mask: &[bool],
    cfg: &CgConfig,
) -> Result<(Vec<f64>, Option<NewtonStep>)> {
    Ok(match mode {
        ApproxMode::ExactQuadratic => {
            let step = cg_solve(op, g_val, cfg)?;
            (step.solution.clone(), Some(step))
        }
        ApproxMode::ApproxQuadratic => (op.apply(g_val)?, None),
        ApproxMode::Linear => (g_val.to_vec(), None),
        ApproxMode::NoVal => (mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(), None),
    })
}

/// Outer gradient using the Hessian of the training loss on the rendered
/// latents.
pub fn hypergradient(inputs: &HypergradInputs<'_>, cfg: &HypergradConfig) -> Result<HypergradReport> {
    if inputs.latents.is_empty() {
        return Err(invalid("no latent samples"));
    }
    let train = render_all(inputs.latents, inputs.sim)?;
    inputs.model.check_data(&train)?;
    let hessian = TrainingHessian::new(inputs.model, &train, inputs.theta_hat.values())?;
    hypergradient_with(inputs, cfg, &hessian)
}

/// Outer gradient with a caller-supplied curvature operator.
pub fn hypergradient_with(
    inputs: &HypergradInputs<'_>,
    cfg: &HypergradConfig,
    hessian: &dyn LinearOperator,
) -> Result<HypergradReport> {
    let k = inputs.latents.len();
    if k == 0 {
        return Err(invalid("no latent samples"));
    }
    let n = inputs.theta_hat.len();
    if hessian.dim() != n {
        return Err(invalid("curvature operator does not match the model"));
    }
    let mask = inputs.model.trainable_mask();
    let mut g_val = val_gradient(inputs.theta_hat, inputs.val_data, inputs.model)?;
    for (g, &m) in g_val.iter_mut().zip(&mask) {
        if !m {
            *g = 0.0;
        }
    }
    let op = HvpOperator::new(hessian, cfg.damping)?;
    let (w, cg) = contraction(cfg.mode, &op, &g_val, &mask, &cfg.cg)?;

    let grads = per_sample_train_grads(inputs.theta_hat, inputs.latents, inputs.sim, inputs.model)?;
    let per_sample_dot: Vec<f64> = grads.iter().map(|g| crate::linalg::dot(g, &w)).collect();
    let per_sample_grad_norm: Vec<f64> = grads.iter().map(|g| norm(g)).collect();

    let m = inputs.psi.dim();
    let mut grad_psi = vec![0.0; m];
    for (s, d) in inputs.latents.iter().zip(&per_sample_dot) {
        let score = log_prob_grad(inputs.psi, s)?;
        crate::linalg::axpy(-d / k as f64, &score, &mut grad_psi);
    }
    if grad_psi.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericalFailure { op: "hypergradient" });
    }
    Ok(HypergradReport {
        grad_psi,
        v_psi: w,
        g_val,
        per_sample_dot,
        per_sample_grad_norm,
        mode: cfg.mode,
        cg,
    })
}
