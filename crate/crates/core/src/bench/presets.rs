//! Tuned settings for the shipped tasks.

use super::config::{
    BlackBoxSection, ExperimentConfig, HypergradSection, LtsSection, Method, RandomSection,
};
use super::oracle::OracleConfig;
use crate::autosim::{Budget, DEFAULT_CLIP_NORM};
use crate::hypergrad::ApproxMode;
use crate::model::TrainConfig;
use crate::optim::OptimizerConfig;
use crate::task::{DataConfig, TaskName};

/// Validation loss the source-mixture comparisons race to.
pub const SOURCE_MIXTURE_TARGET: f64 = 0.02;
/// Validation loss the gaussian-match comparisons race to.
pub const GAUSSIAN_MATCH_TARGET_LOSS: f64 = 0.14;

pub fn preset(task: TaskName, method: Method, mode: ApproxMode, seed: u64) -> ExperimentConfig {
    let (batch_size, inner, outer, iterations, target, blackbox) = match task {
        TaskName::LocationToy => (
            1024,
            TrainConfig::full_batch_sgd(1, 0.5),
            OptimizerConfig::sgd(0.1),
            50,
            None,
            TrainConfig::full_batch_sgd(1, 0.5),
        ),
        TaskName::GaussianMatch => (
            64,
            TrainConfig::full_batch_sgd(100, 0.15),
            OptimizerConfig::adam(0.05),
            300,
            Some(GAUSSIAN_MATCH_TARGET_LOSS),
            TrainConfig::full_batch_sgd(300, 0.15),
        ),
        TaskName::SourceMixture => (
            64,
            TrainConfig::full_batch_sgd(10, 0.1),
            OptimizerConfig::adam(0.05),
            300,
            Some(SOURCE_MIXTURE_TARGET),
            TrainConfig::full_batch_sgd(100, 0.1),
        ),
    };
    ExperimentConfig {
        name: Some(format!("{}-{}-{}-s{seed}", task.as_str(), method.as_str(), mode.as_str())),
        task,
        method,
        mode,
        seed,
        batch_size,
        inner,
        outer,
        clip_norm: Some(DEFAULT_CLIP_NORM),
        reset_theta: false,
        val_subsample: None,
        budget: Budget { iterations, wall_seconds: None, target_val_loss: target },
        hypergrad: HypergradSection::default(),
        blackbox: Some(BlackBoxSection { train: blackbox, warm_start: false }),
        lts: LtsSection::default(),
        random: RandomSection::default(),
        data: DataConfig::default(),
        oracle: OracleConfig::default(),
        simulator: None,
        model: None,
        initial_psi: None,
    }
}
