//! Brute-force reference for the outer gradient: central differences of the
//! validation loss after training to convergence at `psi +- h e_i`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{hvp_slice, value, value_and_gradient, ParamVector};
use crate::error::{invalid, Error, Result};
use crate::linalg::{derive_seed, dot, norm};
use crate::model::{init_model, DatasetObjective, ModelSpec};
use crate::simgen::{DataPoint, SimParams};
use crate::task::Problem;

const ORACLE_STREAM: u64 = 21;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// Step on raw parameters.
    #[serde(default = "default_h")]
    pub h: f64,
    /// Training-set size per objective evaluation.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Inner convergence threshold on the training-gradient norm.
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "default_newton_steps")]
    pub max_newton_steps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_h() -> f64 {
    1e-2
}
fn default_samples() -> usize {
    4096
}
fn default_grad_tol() -> f64 {
    1e-8
}
fn default_newton_steps() -> usize {
    50
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            h: default_h(),
            samples: default_samples(),
            grad_tol: default_grad_tol(),
            max_newton_steps: default_newton_steps(),
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(invalid("finite-difference step must be positive"));
        }
        if self.samples == 0 || self.max_newton_steps == 0 {
            return Err(invalid("oracle needs samples and at least one Newton step"));
        }
        if !(self.grad_tol > 0.0) {
            return Err(invalid("gradient tolerance must be positive"));
        }
        Ok(())
    }
}

/// Damped Newton on the mean training loss with a dense Hessian, run until
/// the trainable gradient norm drops below `grad_tol`.
pub fn train_to_convergence(
    spec: &ModelSpec,
    data: &[DataPoint],
    theta0: &ParamVector,
    grad_tol: f64,
    max_steps: usize,
) -> Result<ParamVector> {
    let objective = DatasetObjective::mean(spec, data);
    let active: Vec<usize> = spec.trainable_mask().iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    let mut theta = theta0.values().to_vec();
    let masked_grad = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (loss, g) = value_and_gradient(&objective, theta)?;
        Ok((loss, active.iter().map(|&i| g[i]).collect()))
    };
    let (mut loss, mut g) = masked_grad(&theta)?;
    for _ in 0..max_steps {
        if norm(&g) <= grad_tol {
            return Ok(theta0.with_values(theta));
        }
        let n = active.len();
        let mut h = DMatrix::zeros(n, n);
        for (c, &i) in active.iter().enumerate() {
            let mut e = vec![0.0; theta.len()];
            e[i] = 1.0;
            let col = hvp_slice(&objective, &theta, &e)?;
            for (r, &j) in active.iter().enumerate() {
                h[(r, c)] = col[j];
            }
        }
        let rhs = DVector::from_column_slice(&g);
        let mut dir: Vec<f64> = match h.lu().solve(&rhs) {
            Some(d) if d.iter().all(|x| x.is_finite()) => d.iter().copied().collect(),
            _ => g.clone(),
        };
        if dot(&dir, &g) <= 0.0 {
            dir = g.clone();
        }
        let mut t = 1.0;
        loop {
            let mut trial = theta.clone();
            for (k, &i) in active.iter().enumerate() {
                trial[i] -= t * dir[k];
            }
            let trial_loss = value(&objective, &trial);
            if trial_loss.is_finite() && trial_loss <= loss {
                theta = trial;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                break;
            }
        }
        (loss, g) = masked_grad(&theta)?;
    }
    let grad_norm = norm(&g);
    if grad_norm <= grad_tol {
        Ok(theta0.with_values(theta))
    } else {
        Err(Error::OracleUnreliable { grad_norm, threshold: grad_tol })
    }
}

/// Summed validation loss after training to convergence on `samples`
/// examples drawn at `psi` with the given seed.
pub fn bilevel_objective(problem: &Problem, psi: &SimParams, cfg: &OracleConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, train) = problem.simulator.generate(psi, cfg.samples, &mut rng)?;
    let theta0 = init_model(&problem.model, cfg.seed)?;
    let theta = train_to_convergence(&problem.model, &train, &theta0, cfg.grad_tol, cfg.max_newton_steps)?;
    let val = DatasetObjective::sum(&problem.model, &problem.val_data);
    let loss = value(&val, theta.values());
    if !loss.is_finite() {
        return Err(Error::NumericalFailure { op: "oracle" });
    }
    Ok(loss)
}

/// Central differences on raw parameters. Both sides of every coordinate
/// share one random stream.
pub fn oracle_bilevel_grad(problem: &Problem, psi: &SimParams, cfg: &OracleConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let seed = derive_seed(cfg.seed, ORACLE_STREAM, 0);
    (0..psi.dim())
        .map(|i| {
            let mut plus = psi.raw().to_vec();
            let mut minus = plus.clone();
            plus[i] += cfg.h;
            minus[i] -= cfg.h;
            let up = bilevel_objective(problem, &psi.with_raw(plus)?, cfg, seed)?;
            let down = bilevel_objective(problem, &psi.with_raw(minus)?, cfg, seed)?;
            Ok((up - down) / (2.0 * cfg.h))
        })
        .collect()
}
