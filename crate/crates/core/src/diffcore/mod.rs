//! Reverse-mode differentiation over flat parameter vectors.
//!
//! Losses are written once against the [`Scalar`] trait and can then be
//! evaluated on `f64`, differentiated with [`gradient`], or probed for
//! curvature with [`hvp`]. The Hessian-vector product differentiates
//! `<grad f, v>` a second time on the same tape, so it is exact and costs
//! roughly one more backward pass than a gradient.

mod tape;

pub use tape::{Scalar, Tape, Var};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// A named, contiguous slice of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl BlockLayout {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter storage with a block layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<BlockLayout>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Vec<BlockLayout>) -> Result<Self> {
        let mut next = 0;
        for block in &layout {
            if block.offset != next {
                return Err(invalid(format!(
                    "block `{}` starts at {} but previous block ended at {}",
                    block.name, block.offset, next
                )));
            }
            next += block.len();
        }
        if next != values.len() {
            return Err(invalid(format!(
                "layout covers {next} values, vector has {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("parameter {i} is not finite")));
        }
        Ok(Self { values, layout })
    }

    /// A single unnamed block covering `values`.
    pub fn flat(values: Vec<f64>) -> Self {
        let layout = vec![BlockLayout {
            name: "flat".into(),
            offset: 0,
            shape: vec![values.len()],
        }];
        Self { values, layout }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &[BlockLayout] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|b| b.name == name)
            .map(|b| &self.values[b.range()])
    }

    /// Same layout, different values.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len(), "dimension mismatch");
        Self {
            values,
            layout: self.layout.clone(),
        }
    }
}

/// A scalar objective of a flat parameter vector.
///
/// Implementations must be deterministic: the same parameters and captured
/// context always produce the same value.
pub trait ScalarFunction: Sync {
    fn eval<S: Scalar>(&self, params: &[S]) -> S;
}

/// Evaluate without recording anything.
pub fn value<F: ScalarFunction + ?Sized>(f: &F, theta: &[f64]) -> f64 {
    f.eval::<f64>(theta)
}

/// Value and gradient in one reverse sweep.
pub fn value_and_gradient<F: ScalarFunction + ?Sized>(f: &F, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = theta.iter().map(|&t| tape.var(t)).collect();
    let out = f.eval(&leaves);
    tape.check_finite()?;
    let adj = tape.adjoints(out);
    let grad: Vec<f64> = leaves
        .iter()
        .map(|l| adj.get(l.index()).copied().unwrap_or(0.0))
        .collect();
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericalFailure { op: "backward" });
    }
    Ok((out.value(), grad))
}

pub fn gradient_slice<F: ScalarFunction + ?Sized>(f: &F, theta: &[f64]) -> Result<Vec<f64>> {
    value_and_gradient(f, theta).map(|(_, g)| g)
}

/// `∇f(θ)`, laid out like `theta`.
pub fn gradient<F: ScalarFunction + ?Sized>(f: &F, theta: &ParamVector) -> Result<ParamVector> {
    gradient_slice(f, theta.values()).map(|g| theta.with_values(g))
}

pub fn hvp_slice<F: ScalarFunction + ?Sized>(f: &F, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != theta.len() {
        return Err(invalid(format!(
            "hvp direction has {} entries, parameters have {}",
            v.len(),
            theta.len()
        )));
    }
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = theta.iter().map(|&t| tape.var(t)).collect();
    let out = f.eval(&leaves);
    let grads = tape.grad_vars(out, &leaves);
    // <∇f, v> with v held constant
    let mut inner: Option<Var<'_>> = None;
    for (g, &vi) in grads.iter().zip(v) {
        if let Some(g) = g {
            if vi != 0.0 {
                let term = *g * vi;
                inner = Some(match inner {
                    Some(acc) => acc + term,
                    None => term,
                });
            }
        }
    }
    tape.check_finite()?;
    let Some(inner) = inner else {
        return Ok(vec![0.0; theta.len()]);
    };
    let adj = tape.adjoints(inner);
    let hv: Vec<f64> = leaves
        .iter()
        .map(|l| adj.get(l.index()).copied().unwrap_or(0.0))
        .collect();
    if hv.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericalFailure { op: "backward" });
    }
    Ok(hv)
}

/// Exact `∇²f(θ) v` by double-backward.
pub fn hvp<F: ScalarFunction + ?Sized>(f: &F, theta: &ParamVector, v: &[f64]) -> Result<ParamVector> {
    hvp_slice(f, theta.values(), v).map(|h| theta.with_values(h))
}
