//! Small dense task networks and their losses.

mod train;

pub use train::{fine_tune, TrainConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{BlockLayout, ParamVector, Scalar, ScalarFunction};
use crate::error::{invalid, Error, Result};
use crate::simgen::{DataPoint, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mse,
    CrossEntropy,
}

/// Fully connected network `layer_sizes[0] -> ... -> layer_sizes[L]`.
///
/// Parameters are laid out per layer as `w{l}` (row-major, `out x in`)
/// followed by `b{l}`. `trainable` has one flag per block in that order;
/// an empty list means everything trains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trainable: Vec<bool>,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, loss: LossKind) -> Self {
        Self {
            layer_sizes,
            activation,
            loss,
            trainable: Vec::new(),
        }
    }

    /// A single affine layer with squared loss.
    pub fn linear(inputs: usize, outputs: usize) -> Self {
        Self::new(vec![inputs, outputs], Activation::Tanh, LossKind::Mse)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        if !self.trainable.is_empty() && !self.trainable.iter().any(|&t| t) {
            return Err(invalid("at least one block must be trainable"));
        }
        Ok(())
    }

    /// Structural checks only; a fully frozen mask passes.
    pub fn validate_shape(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(invalid("a model needs at least an input and an output layer"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(invalid("layer sizes must be positive"));
        }
        let blocks = 2 * (self.layer_sizes.len() - 1);
        if !self.trainable.is_empty() && self.trainable.len() != blocks {
            return Err(invalid(format!(
                "trainable mask has {} entries, model has {blocks} blocks",
                self.trainable.len()
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<BlockLayout> {
        let mut layout = Vec::new();
        let mut offset = 0;
        for (l, pair) in self.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            layout.push(BlockLayout { name: format!("w{l}"), offset, shape: vec![fan_out, fan_in] });
            offset += fan_in * fan_out;
            layout.push(BlockLayout { name: format!("b{l}"), offset, shape: vec![fan_out] });
            offset += fan_out;
        }
        layout
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    /// One flag per parameter.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.param_count());
        for (i, block) in self.layout().iter().enumerate() {
            let on = self.trainable.get(i).copied().unwrap_or(true);
            mask.extend(std::iter::repeat_n(on, block.len()));
        }
        mask
    }

    pub fn forward<S: Scalar>(&self, params: &[S], input: &[f64]) -> Vec<S> {
        debug_assert_eq!(input.len(), self.layer_sizes[0]);
        let anchor = params[0];
        let mut act: Vec<S> = input.iter().map(|&x| anchor.lift(x)).collect();
        let mut offset = 0;
        let last = self.layer_sizes.len() - 2;
        for (l, pair) in self.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = &params[offset..offset + fan_in * fan_out];
            let b = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            act = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    let z = row.iter().zip(&act).fold(b[o], |acc, (wi, xi)| acc + *wi * *xi);
                    if l == last {
                        z
                    } else {
                        match self.activation {
                            Activation::Tanh => z.tanh(),
                            Activation::Relu => z.relu(),
                        }
                    }
                })
                .collect();
        }
        act
    }

    /// Loss of one example: mean squared error over outputs, or softmax
    /// cross-entropy against a class index.
    pub fn example_loss<S: Scalar>(&self, params: &[S], point: &DataPoint) -> S {
        let out = self.forward(params, &point.input);
        match (self.loss, &point.target) {
            (LossKind::Mse, Target::Real(y)) => {
                let mut acc = out[0].lift(0.0);
                for (p, t) in out.iter().zip(y) {
                    let d = *p - *t;
                    acc = acc + d * d;
                }
                acc / out.len() as f64
            }
            (LossKind::CrossEntropy, Target::Class(c)) => {
                let max = out.iter().map(Scalar::value).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = out[0].lift(0.0);
                for o in &out {
                    sum = sum + (*o - max).exp();
                }
                sum.ln() + max - out[*c]
            }
            (LossKind::Mse, Target::Class(c)) => {
                // one-hot regression target
                let mut acc = out[0].lift(0.0);
                for (i, p) in out.iter().enumerate() {
                    let d = *p - if i == *c { 1.0 } else { 0.0 };
                    acc = acc + d * d;
                }
                acc / out.len() as f64
            }
            (LossKind::CrossEntropy, Target::Real(_)) => {
                panic!("cross-entropy needs class targets")
            }
        }
    }

    pub fn check_data(&self, data: &[DataPoint]) -> Result<()> {
        let (d_in, d_out) = (self.layer_sizes[0], *self.layer_sizes.last().unwrap());
        for (i, p) in data.iter().enumerate() {
            if p.input.len() != d_in {
                return Err(invalid(format!("example {i} has {} inputs, model expects {d_in}", p.input.len())));
            }
            match (&p.target, self.loss) {
                (Target::Real(y), LossKind::Mse) if y.len() != d_out => {
                    return Err(invalid(format!("example {i} target has {} entries, model outputs {d_out}", y.len())))
                }
                (Target::Class(c), _) if *c >= d_out => {
                    return Err(invalid(format!("example {i} class {c} out of range")))
                }
                (Target::Real(_), LossKind::CrossEntropy) => {
                    return Err(invalid("cross-entropy needs class targets"))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Loss of a model over a dataset as a differentiable objective.
pub struct DatasetObjective<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a [DataPoint],
    pub reduction: Reduction,
}

impl<'a> DatasetObjective<'a> {
    pub fn mean(spec: &'a ModelSpec, data: &'a [DataPoint]) -> Self {
        Self { spec, data, reduction: Reduction::Mean }
    }

    pub fn sum(spec: &'a ModelSpec, data: &'a [DataPoint]) -> Self {
        Self { spec, data, reduction: Reduction::Sum }
    }
}

impl ScalarFunction for DatasetObjective<'_> {
    fn eval<S: Scalar>(&self, params: &[S]) -> S {
        let mut acc = params[0].lift(0.0);
        for p in self.data {
            acc = acc + self.spec.example_loss(params, p);
        }
        match self.reduction {
            Reduction::Mean => acc / self.data.len() as f64,
            Reduction::Sum => acc,
        }
    }
}

/// Parameters drawn uniformly from `±1/sqrt(fan_in)`.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for pair in spec.layer_sizes.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out + fan_out {
            values.push(rng.random_range(-bound..bound));
        }
    }
    ParamVector::new(values, spec.layout())
}

/// Mean per-example loss.
pub fn dataset_loss(theta: &ParamVector, data: &[DataPoint], spec: &ModelSpec) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("empty dataset"));
    }
    if theta.len() != spec.param_count() {
        return Err(invalid("parameter count does not match the model"));
    }
    spec.check_data(data)?;
    let loss = crate::diffcore::value(&DatasetObjective::mean(spec, data), theta.values());
    if !loss.is_finite() {
        return Err(Error::NumericalFailure { op: "loss" });
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let spec = ModelSpec::linear(1, 1);
        assert_eq!(init_model(&spec, 0).unwrap(), init_model(&spec, 0).unwrap());
    }

    #[test]
    fn init_depends_on_seed() {
        let spec = ModelSpec::new(vec![2, 3, 1], Activation::Tanh, LossKind::Mse);
        assert_ne!(init_model(&spec, 0).unwrap(), init_model(&spec, 1).unwrap());
    }

    #[test]
    fn parameter_count() {
        let spec = ModelSpec::new(vec![2, 3, 1], Activation::Tanh, LossKind::Mse);
        assert_eq!(spec.param_count(), 13);
        assert_eq!(init_model(&spec, 3).unwrap().len(), 13);
    }

    #[test]
    fn perfect_constant_fit_has_zero_loss() {
        let spec = ModelSpec::linear(1, 1);
        let theta = ParamVector::new(vec![0.0, 2.5], spec.layout()).unwrap();
        let data: Vec<_> = (0..5)
            .map(|i| DataPoint::regression(vec![i as f64], vec![2.5]))
            .collect();
        assert_eq!(dataset_loss(&theta, &data, &spec).unwrap(), 0.0);
    }

    #[test]
    fn single_point_mse() {
        let spec = ModelSpec::linear(1, 1);
        let theta = ParamVector::new(vec![2.0, 1.0], spec.layout()).unwrap();
        // prediction 2*1.5+1 = 4, target 1
        let data = vec![DataPoint::regression(vec![1.5], vec![1.0])];
        assert_eq!(dataset_loss(&theta, &data, &spec).unwrap(), 9.0);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_c() {
        let c = 5;
        let spec = ModelSpec::new(vec![3, c], Activation::Tanh, LossKind::CrossEntropy);
        let theta = ParamVector::new(vec![0.0; spec.param_count()], spec.layout()).unwrap();
        let data = vec![DataPoint { input: vec![0.3, -1.0, 2.0], target: Target::Class(2) }];
        let loss = dataset_loss(&theta, &data, &spec).unwrap();
        assert!((loss - (c as f64).ln()).abs() < 1e-14);
    }

    #[test]
    fn empty_dataset_rejected() {
        let spec = ModelSpec::linear(1, 1);
        let theta = init_model(&spec, 0).unwrap();
        assert!(matches!(dataset_loss(&theta, &[], &spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ModelSpec::linear(1, 1).validate().is_ok());
        assert!(ModelSpec::new(vec![3], Activation::Tanh, LossKind::Mse).validate().is_err());
        let mut frozen = ModelSpec::linear(1, 1);
        frozen.trainable = vec![false, false];
        assert!(frozen.validate().is_err());
        frozen.trainable = vec![false];
        assert!(frozen.validate().is_err());
    }

    #[test]
    fn mask_follows_blocks() {
        let mut spec = ModelSpec::new(vec![2, 2, 1], Activation::Relu, LossKind::Mse);
        spec.trainable = vec![false, true, true, false];
        let mask = spec.trainable_mask();
        assert_eq!(mask.len(), 9);
        assert_eq!(mask, vec![false, false, false, false, true, true, true, true, false]);
    }
}
