use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dataset_loss, DatasetObjective, ModelSpec};
use crate::diffcore::{gradient_slice, ParamVector};
use crate::error::{invalid, Error, Result};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::simgen::DataPoint;

/// Loss growth factor over the initial loss that counts as divergence.
const DIVERGENCE_FACTOR: f64 = 1e6;

/// Inner-loop training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Mini-batch size; `None` trains full-batch. Clipped to the dataset size.
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn full_batch_sgd(epochs: usize, step_size: f64) -> Self {
        Self {
            epochs,
            batch_size: None,
            optimizer: OptimizerConfig::sgd(step_size),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("training needs at least one epoch"));
        }
        if self.batch_size == Some(0) {
            return Err(invalid("batch size must be positive"));
        }
        if !(self.optimizer.step_size >= 0.0 && self.optimizer.step_size.is_finite()) {
            return Err(invalid("step size must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Trains `theta` on `data` for `cfg.epochs` epochs and returns the result.
/// Frozen blocks of `spec` are copied through untouched.
pub fn fine_tune(
    theta: &ParamVector,
    data: &[DataPoint],
    cfg: &TrainConfig,
    spec: &ModelSpec,
) -> Result<ParamVector> {
    spec.validate_shape()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("cannot train on an empty dataset"));
    }
    let mask = spec.trainable_mask();
    if !mask.iter().any(|&m| m) {
        return Ok(theta.clone());
    }
    let initial = dataset_loss(theta, data, spec)?;
    let limit = DIVERGENCE_FACTOR * initial.max(1e-12);

    let n = data.len();
    let batch = cfg.batch_size.unwrap_or(n).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(theta.len());
    let mut params = theta.values().to_vec();
    let mut scratch: Vec<DataPoint> = Vec::with_capacity(batch);

    for epoch in 0..cfg.epochs {
        if batch < n {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let grad = if batch == n {
                gradient_slice(&DatasetObjective::mean(spec, data), &params)
            } else {
                scratch.clear();
                scratch.extend(chunk.iter().map(|&i| data[i].clone()));
                gradient_slice(&DatasetObjective::mean(spec, &scratch), &params)
            };
            let grad = grad.map_err(|e| match e {
                Error::NumericalFailure { .. } => Error::TrainingDiverged { epoch },
                other => other,
            })?;
            state.step(&cfg.optimizer, &mut params, &grad, Some(&mask));
        }
        let loss = crate::diffcore::value(&DatasetObjective::mean(spec, data), &params);
        if !loss.is_finite() || loss > limit {
            return Err(Error::TrainingDiverged { epoch });
        }
    }
    ParamVector::new(params, theta.layout().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Activation, LossKind};

    fn bias_only() -> ModelSpec {
        let mut spec = ModelSpec::linear(1, 1);
        spec.trainable = vec![false, true];
        spec
    }

    #[test]
    fn one_newton_sized_step_solves_quadratic() {
        // loss (b - 5)^2 with the weight frozen and a zero input
        let spec = bias_only();
        let theta = ParamVector::new(vec![0.0, 0.0], spec.layout()).unwrap();
        let data = vec![DataPoint::regression(vec![0.0], vec![5.0])];
        let out = fine_tune(&theta, &data, &TrainConfig::full_batch_sgd(1, 0.5), &spec).unwrap();
        assert_eq!(out.values(), &[0.0, 5.0]);
    }

    #[test]
    fn fully_frozen_model_is_unchanged() {
        let mut spec = ModelSpec::new(vec![2, 3, 1], Activation::Tanh, LossKind::Mse);
        spec.trainable = vec![false; 4];
        let theta = init_model(&ModelSpec::new(vec![2, 3, 1], Activation::Tanh, LossKind::Mse), 4).unwrap();
        let data = vec![DataPoint::regression(vec![1.0, 2.0], vec![3.0])];
        let out = fine_tune(&theta, &data, &TrainConfig::full_batch_sgd(10, 0.1), &spec).unwrap();
        assert_eq!(out, theta);
    }

    #[test]
    fn frozen_blocks_are_bit_identical() {
        let mut spec = ModelSpec::new(vec![2, 3, 1], Activation::Tanh, LossKind::Mse);
        spec.trainable = vec![true, false, false, true];
        let theta = init_model(&spec, 7).unwrap();
        let data: Vec<_> = (0..6)
            .map(|i| DataPoint::regression(vec![i as f64 * 0.1, 1.0], vec![(i as f64).sin()]))
            .collect();
        let cfg = TrainConfig { batch_size: Some(4), ..TrainConfig::full_batch_sgd(5, 0.05) };
        let out = fine_tune(&theta, &data, &cfg, &spec).unwrap();
        assert_eq!(out.block("b0"), theta.block("b0"));
        assert_eq!(out.block("w1"), theta.block("w1"));
        assert_ne!(out.block("w0"), theta.block("w0"));
    }

    #[test]
    fn small_step_does_not_increase_loss() {
        let spec = ModelSpec::new(vec![2, 4, 1], Activation::Tanh, LossKind::Mse);
        let theta = init_model(&spec, 1).unwrap();
        let data: Vec<_> = (0..8)
            .map(|i| {
                let x = i as f64 / 4.0 - 1.0;
                DataPoint::regression(vec![x, x * x], vec![x.cos()])
            })
            .collect();
        let before = dataset_loss(&theta, &data, &spec).unwrap();
        let out = fine_tune(&theta, &data, &TrainConfig::full_batch_sgd(3, 1e-3), &spec).unwrap();
        assert!(dataset_loss(&out, &data, &spec).unwrap() <= before);
    }

    #[test]
    fn full_batch_sgd_is_deterministic() {
        let spec = ModelSpec::new(vec![1, 3, 1], Activation::Relu, LossKind::Mse);
        let theta = init_model(&spec, 2).unwrap();
        let data: Vec<_> = (0..5).map(|i| DataPoint::regression(vec![i as f64], vec![1.0])).collect();
        let cfg = TrainConfig::full_batch_sgd(20, 0.01);
        assert_eq!(
            fine_tune(&theta, &data, &cfg, &spec).unwrap(),
            fine_tune(&theta, &data, &cfg, &spec).unwrap()
        );
    }

    #[test]
    fn huge_step_reports_divergence() {
        let spec = ModelSpec::linear(1, 1);
        let theta = init_model(&spec, 0).unwrap();
        let data: Vec<_> = (0..4).map(|i| DataPoint::regression(vec![10.0 * i as f64], vec![1.0])).collect();
        let err = fine_tune(&theta, &data, &TrainConfig::full_batch_sgd(50, 10.0), &spec).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { .. }));
    }

    #[test]
    fn empty_data_rejected() {
        let spec = ModelSpec::linear(1, 1);
        let theta = init_model(&spec, 0).unwrap();
        assert!(fine_tune(&theta, &[], &TrainConfig::full_batch_sgd(1, 0.1), &spec).is_err());
    }
}
