use crate::diffcore::hvp_slice;
use crate::error::{invalid, Error, Result};
use crate::model::{DatasetObjective, ModelSpec};
use crate::simgen::DataPoint;

/// A symmetric linear map given only through its action on vectors.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperator {
    n: usize,
    data: Vec<f64>,
}

impl DenseOperator {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(invalid(format!("dense operator needs {} entries, got {}", n * n, data.len())));
        }
        Ok(Self { n, data })
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut data = vec![0.0; n * n];
        for (i, d) in diag.iter().enumerate() {
            data[i * n + i] = *d;
        }
        Self { n, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n])
    }
}

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.n {
            return Err(invalid("operator dimension mismatch"));
        }
        Ok(self
            .data
            .chunks(self.n)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// Hessian of the mean training loss at fixed parameters, restricted to the
/// trainable coordinates: `M H M v` with `M` the 0/1 trainable mask.
pub struct TrainingHessian<'a> {
    objective: DatasetObjective<'a>,
    theta: &'a [f64],
    mask: Vec<bool>,
}

impl<'a> TrainingHessian<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a [DataPoint], theta: &'a [f64]) -> Result<Self> {
        if data.is_empty() {
            return Err(invalid("Hessian of an empty dataset"));
        }
        if theta.len() != spec.param_count() {
            return Err(invalid("parameter count does not match the model"));
        }
        Ok(Self {
            objective: DatasetObjective::mean(spec, data),
            theta,
            mask: spec.trainable_mask(),
        })
    }
}

impl LinearOperator for TrainingHessian<'_> {
    fn dim(&self) -> usize {
        self.theta.len()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let masked: Vec<f64> = v
            .iter()
            .zip(&self.mask)
            .map(|(x, &m)| if m { *x } else { 0.0 })
            .collect();
        let mut hv = hvp_slice(&self.objective, self.theta, &masked)?;
        for (h, &m) in hv.iter_mut().zip(&self.mask) {
            if !m {
                *h = 0.0;
            }
        }
        Ok(hv)
    }
}

/// Levenberg-damped curvature `(H + damping I)`.
#[derive(Clone, Copy)]
pub struct HvpOperator<'a> {
    hessian: &'a dyn LinearOperator,
    damping: f64,
}

impl<'a> HvpOperator<'a> {
    pub fn new(hessian: &'a dyn LinearOperator, damping: f64) -> Result<Self> {
        if !(damping >= 0.0 && damping.is_finite()) {
            return Err(invalid("damping must be finite and non-negative"));
        }
        Ok(Self { hessian, damping })
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn dim(&self) -> usize {
        self.hessian.dim()
    }

    pub fn with_damping(&self, damping: f64) -> Result<Self> {
        Self::new(self.hessian, damping)
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.hessian.apply(v)?;
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalFailure { op: "hvp" });
        }
        if self.damping != 0.0 {
            crate::linalg::axpy(self.damping, v, &mut out);
        }
        Ok(out)
    }
}
