use serde::{Deserialize, Serialize};

use super::operator::HvpOperator;
use crate::error::{invalid, Error, Result};
use crate::linalg::{all_finite, axpy, dot, norm};

/// How many times `RaiseDamping` may multiply the damping before giving up.
const MAX_DAMPING_RAISES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeCurvaturePolicy {
    /// Stop and return the current iterate, flagged as truncated.
    #[default]
    Truncate,
    /// Multiply the damping by ten and restart.
    RaiseDamping,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgConfig {
    pub max_iters: usize,
    pub rel_tolerance: f64,
    #[serde(default)]
    pub negative_curvature: NegativeCurvaturePolicy,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            rel_tolerance: 1e-6,
            negative_curvature: NegativeCurvaturePolicy::Truncate,
        }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(invalid("CG needs at least one iteration"));
        }
        if !(self.rel_tolerance > 0.0 && self.rel_tolerance < 1.0) {
            return Err(invalid("CG tolerance must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Approximate solution of `(H + damping I) x = g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonStep {
    pub solution: Vec<f64>,
    /// `|r| / |g|` at exit.
    pub cg_residual: f64,
    pub iters_used: usize,
    /// Set when CG stopped early on negative curvature or the iteration cap.
    pub truncated: bool,
    /// Damping actually used, after any raises.
    pub damping: f64,
}

/// Conjugate gradient on `min_v 1/2 v'(H + damping I)v - g'v`.
pub fn cg_solve(op: &HvpOperator<'_>, g: &[f64], cfg: &CgConfig) -> Result<NewtonStep> {
    cfg.validate()?;
    if g.len() != op.dim() {
        return Err(invalid(format!("right-hand side has {} entries, operator {}", g.len(), op.dim())));
    }
    if !all_finite(g) {
        return Err(Error::NumericalFailure { op: "cg" });
    }
    let g_norm = norm(g);
    if g_norm == 0.0 {
        return Ok(NewtonStep {
            solution: vec![0.0; g.len()],
            cg_residual: 0.0,
            iters_used: 0,
            truncated: false,
            damping: op.damping(),
        });
    }

    let mut op = *op;
    let mut raises = 0;
    let mut total_iters = 0;
    'restart: loop {
        let mut x = vec![0.0; g.len()];
        let mut r = g.to_vec();
        let mut p = r.clone();
        let mut rr = dot(&r, &r);
        for it in 0..cfg.max_iters {
            let ap = op.apply(&p)?;
            total_iters += 1;
            let curvature = dot(&p, &ap);
            if !curvature.is_finite() {
                return Err(Error::NumericalFailure { op: "cg" });
            }
            if curvature <= 0.0 {
                match cfg.negative_curvature {
                    NegativeCurvaturePolicy::Truncate => {
                        // nothing accumulated yet: fall back to the right-hand side
                        let solution = if it == 0 { g.to_vec() } else { x };
                        return Ok(NewtonStep {
                            solution,
                            cg_residual: rr.sqrt() / g_norm,
                            iters_used: total_iters,
                            truncated: true,
                            damping: op.damping(),
                        });
                    }
                    NegativeCurvaturePolicy::RaiseDamping => {
                        if raises == MAX_DAMPING_RAISES {
                            return Err(Error::NegativeCurvature { damping: op.damping() });
                        }
                        raises += 1;
                        let next = if op.damping() == 0.0 { 1e-2 } else { op.damping() * 10.0 };
                        op = op.with_damping(next)?;
                        continue 'restart;
                    }
                }
            }
            let alpha = rr / curvature;
            axpy(alpha, &p, &mut x);
            axpy(-alpha, &ap, &mut r);
            let rr_next = dot(&r, &r);
            if rr_next.sqrt() <= cfg.rel_tolerance * g_norm {
                return Ok(NewtonStep {
                    solution: x,
                    cg_residual: rr_next.sqrt() / g_norm,
                    iters_used: total_iters,
                    truncated: false,
                    damping: op.damping(),
                });
            }
            let beta = rr_next / rr;
            for (pi, ri) in p.iter_mut().zip(&r) {
                *pi = ri + beta * *pi;
            }
            rr = rr_next;
        }
        return Ok(NewtonStep {
            solution: x,
            cg_residual: rr.sqrt() / g_norm,
            iters_used: total_iters,
            truncated: true,
            damping: op.damping(),
        });
    }
}
