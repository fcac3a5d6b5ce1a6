//! Learning the parameters of a stochastic data simulator so that a model
//! trained on its output does well on held-out data.
//!
//! Each outer iteration samples one training set, fine-tunes the task model
//! on it, and differentiates a local Newton-step model of the validation loss
//! with respect to the simulator parameters. The validation gradient is pulled
//! back through an inverse Hessian-vector product (conjugate gradient) and
//! through the sampler with the score function, so the renderer itself never
//! has to be differentiable.
//!
//! Modules, bottom up:
//! - [`diffcore`]: reverse-mode AD with exact Hessian-vector products.
//! - [`model`]: dense networks, losses and the inner trainer.
//! - [`simgen`]: latent distributions, renderers, score functions.
//! - [`hypergrad`]: CG solver and the simulator-parameter gradient.
//! - [`autosim`]: the outer loop.
//! - [`baselines`]: black-box REINFORCE and random search.
//! - [`bench`]: configs, metrics, the finite-difference oracle and self-checks.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autosim;
pub mod baselines;
pub mod bench;
pub mod diffcore;
pub mod error;
pub mod hypergrad;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod simgen;
pub mod task;

pub use error::{Error, Result};
