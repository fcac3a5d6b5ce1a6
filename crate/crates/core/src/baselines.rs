//! Black-box comparators. Each objective evaluation generates a fresh
//! training set, trains a model on it and scores it on validation.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autosim::{Budget, IterationRecord, StopReason};
use crate::diffcore::ParamVector;
use crate::error::{invalid, Error, Result};
use crate::linalg::{axpy, derive_seed, norm, scale};
use crate::model::{dataset_loss, fine_tune, init_model, TrainConfig};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::simgen::SimParams;
use crate::task::Problem;

const SAMPLE_STREAM: u64 = 11;
const TRAIN_STREAM: u64 = 12;
const POLICY_STREAM: u64 = 13;
const DRAW_STREAM: u64 = 14;

pub const DEFAULT_POLICY_SIGMA: f64 = 0.1;

/// How one objective evaluation trains its model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlackBoxConfig {
    pub dataset_size: usize,
    pub train: TrainConfig,
    /// Seed of the fresh initialization.
    #[serde(default)]
    pub init_seed: u64,
    /// Start from the best model found so far instead of a fresh one.
    #[serde(default)]
    pub warm_start: bool,
}

impl BlackBoxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dataset_size == 0 {
            return Err(invalid("dataset size must be positive"));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlackBoxEval {
    pub psi_candidate: Vec<f64>,
    pub dataset_size: usize,
    /// `+inf` when training diverged.
    pub val_loss: f64,
    pub test_loss: f64,
    pub samples_charged: u64,
    pub seconds: f64,
    pub diverged: bool,
}

/// Trains from a fresh initialization and scores the result.
pub fn evaluate_objective(problem: &Problem, psi: &SimParams, cfg: &BlackBoxConfig, seed: u64) -> Result<BlackBoxEval> {
    let theta0 = init_model(&problem.model, cfg.init_seed)?;
    evaluate_from(problem, psi, cfg, &theta0, seed).map(|(eval, _)| eval)
}

/// Trains from `theta0`; also returns the trained parameters (`None` when
/// training diverged).
pub fn evaluate_from(
    problem: &Problem,
    psi: &SimParams,
    cfg: &BlackBoxConfig,
    theta0: &ParamVector,
    seed: u64,
) -> Result<(BlackBoxEval, Option<ParamVector>)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SAMPLE_STREAM, 0));
    let (_, train) = problem.simulator.generate(psi, cfg.dataset_size, &mut rng)?;
    let train_cfg = TrainConfig { seed: derive_seed(seed, TRAIN_STREAM, 0), ..cfg.train };
    let trained = match fine_tune(theta0, &train, &train_cfg, &problem.model) {
        Ok(theta) => Some(theta),
        Err(Error::TrainingDiverged { .. }) => None,
        Err(e) => return Err(e),
    };
    let (val_loss, test_loss) = match &trained {
        Some(theta) => (
            dataset_loss(theta, &problem.val_data, &problem.model)?,
            if problem.test_data.is_empty() {
                f64::NAN
            } else {
                dataset_loss(theta, &problem.test_data, &problem.model)?
            },
        ),
        None => (f64::INFINITY, f64::INFINITY),
    };
    let eval = BlackBoxEval {
        psi_candidate: psi.raw().to_vec(),
        dataset_size: cfg.dataset_size,
        val_loss,
        test_loss,
        samples_charged: cfg.dataset_size as u64,
        seconds: start.elapsed().as_secs_f64(),
        diverged: trained.is_none(),
    };
    Ok((eval, trained))
}

/// Result of a black-box run.
#[derive(Debug)]
pub struct BaselineRun {
    pub history: Vec<IterationRecord>,
    pub evaluations: Vec<BlackBoxEval>,
    /// Policy mean for REINFORCE, best candidate for random search.
    pub final_psi: Vec<f64>,
    pub stop: StopReason,
    pub error: Option<Error>,
}

impl BaselineRun {
    pub fn cumulative_samples(&self) -> u64 {
        self.history.last().map_or(0, |r| r.cumulative_samples)
    }
}

fn finish(history: &[IterationRecord], budget: &Budget) -> Option<StopReason> {
    let last = history.last()?;
    if budget.target_val_loss.is_some_and(|t| last.best_val_loss <= t) {
        return Some(StopReason::Target);
    }
    if budget.wall_seconds.is_some_and(|w| last.wall_seconds >= w) {
        return Some(StopReason::WallClock);
    }
    None
}

/// Mean-baselined REINFORCE direction `sum_p (r_p - mean r) score_p`.
pub fn reinforce_direction(rewards: &[f64], scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    if rewards.len() != scores.len() || rewards.len() < 2 {
        return Err(invalid("need at least two rewards, one score each"));
    }
    let dim = scores[0].len();
    if scores.iter().any(|s| s.len() != dim) {
        return Err(invalid("scores differ in dimension"));
    }
    // offsets from the first reward, so equal rewards cancel exactly
    let mean = rewards[0] + rewards.iter().map(|r| r - rewards[0]).sum::<f64>() / rewards.len() as f64;
    let mut dir = vec![0.0; dim];
    for (r, s) in rewards.iter().zip(scores) {
        axpy(r - mean, s, &mut dir);
    }
    Ok(dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LtsConfig {
    /// Candidates per iteration (`P`).
    pub candidates: usize,
    /// Exploration scale of the Gaussian policy over raw parameters.
    pub sigma: f64,
    /// Applied to the negated ascent direction.
    pub optimizer: OptimizerConfig,
    pub eval: BlackBoxConfig,
    pub budget: Budget,
    pub seed: u64,
}

impl LtsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates < 2 {
            return Err(invalid("REINFORCE needs at least two candidates per iteration"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(invalid("policy sigma must be positive"));
        }
        self.eval.validate()?;
        self.budget.validate()
    }
}

/// REINFORCE on the full black-box objective with a Gaussian policy whose
/// mean lives in raw parameter space. Reward is the negated validation loss.
pub fn lts_reinforce(problem: &Problem, cfg: &LtsConfig) -> Result<BaselineRun> {
    cfg.validate()?;
    let mut mean = problem.initial_psi.raw().to_vec();
    let dim = mean.len();
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| invalid(e.to_string()))?;
    let mut optimizer = OptimizerState::new(dim);
    let mut run = BaselineRun {
        history: Vec::new(),
        evaluations: Vec::new(),
        final_psi: mean.clone(),
        stop: StopReason::Budget,
        error: None,
    };
    let mut theta_best = init_model(&problem.model, cfg.eval.init_seed)?;
    let (mut samples, mut wall, mut best) = (0u64, 0.0, f64::INFINITY);

    for t in 0..cfg.budget.iterations {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, POLICY_STREAM, t as u64));
        let eps: Vec<Vec<f64>> = (0..cfg.candidates)
            .map(|_| (0..dim).map(|_| noise.sample(&mut rng)).collect())
            .collect();
        let candidates = eps
            .iter()
            .map(|e| {
                let mut raw = mean.clone();
                axpy(1.0, e, &mut raw);
                problem.psi(raw)
            })
            .collect::<Result<Vec<_>>>()?;
        let theta0 = if cfg.eval.warm_start { theta_best.clone() } else { init_model(&problem.model, cfg.eval.init_seed)? };
        let results: Vec<Result<(BlackBoxEval, Option<ParamVector>)>> = candidates
            .par_iter()
            .enumerate()
            .map(|(p, psi)| {
                let seed = derive_seed(cfg.seed, (t * cfg.candidates + p) as u64, 0);
                evaluate_from(problem, psi, &cfg.eval, &theta0, seed)
            })
            .collect();

        let mut rewards = Vec::new();
        let mut scores = Vec::new();
        let mut iter_best: Option<(f64, f64, ParamVector)> = None;
        for (e, res) in eps.iter().zip(results) {
            match res {
                Ok((eval, theta)) => {
                    samples += eval.samples_charged;
                    if let Some(theta) = theta {
                        rewards.push(-eval.val_loss);
                        // score of N(mean, sigma^2) at mean + e
                        scores.push(scale(1.0 / (cfg.sigma * cfg.sigma), e));
                        if iter_best.as_ref().is_none_or(|b| eval.val_loss < b.0) {
                            iter_best = Some((eval.val_loss, eval.test_loss, theta));
                        }
                    }
                    run.evaluations.push(eval);
                }
                Err(err) => {
                    run.error.get_or_insert(err);
                }
            }
        }

        let direction = if rewards.len() >= 2 { reinforce_direction(&rewards, &scores)? } else { vec![0.0; dim] };
        let psi_before = mean.clone();
        let ascent: Vec<f64> = direction.iter().map(|d| -d).collect();
        optimizer.step(&cfg.optimizer, &mut mean, &ascent, None);
        if mean.iter().any(|x| !x.is_finite()) {
            run.error = Some(Error::NumericalFailure { op: "policy update" });
            run.stop = StopReason::Error;
            return Ok(run);
        }
        wall += start.elapsed().as_secs_f64();
        let (val, test) = match iter_best {
            Some((v, te, theta)) => {
                if v < best {
                    theta_best = theta;
                }
                (v, te)
            }
            None => (f64::INFINITY, f64::INFINITY),
        };
        best = best.min(val);
        run.history.push(IterationRecord {
            iteration: t,
            cumulative_samples: samples,
            val_loss: val,
            best_val_loss: best,
            test_loss: test,
            psi: psi_before,
            grad_norm: norm(&direction),
            cg_iters: 0,
            cg_residual: 0.0,
            wall_seconds: wall,
        });
        run.final_psi = mean.clone();
        if rewards.len() < 2 && run.error.is_some() {
            run.stop = StopReason::Error;
            return Ok(run);
        }
        if let Some(stop) = finish(&run.history, &cfg.budget) {
            run.stop = stop;
            return Ok(run);
        }
    }
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomSearchConfig {
    /// Raw parameters are drawn uniformly from `[low, high]` per coordinate.
    pub low: f64,
    pub high: f64,
    pub eval: BlackBoxConfig,
    pub budget: Budget,
    pub seed: u64,
}

/// I.i.d. draws from a box, tracking the best validation loss.
pub fn random_search(problem: &Problem, cfg: &RandomSearchConfig) -> Result<BaselineRun> {
    cfg.eval.validate()?;
    cfg.budget.validate()?;
    if !(cfg.low < cfg.high) {
        return Err(invalid("random search box needs low < high"));
    }
    let dim = problem.initial_psi.dim();
    let mut run = BaselineRun {
        history: Vec::new(),
        evaluations: Vec::new(),
        final_psi: problem.initial_psi.raw().to_vec(),
        stop: StopReason::Budget,
        error: None,
    };
    let (mut samples, mut wall, mut best) = (0u64, 0.0, f64::INFINITY);
    for t in 0..cfg.budget.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, DRAW_STREAM, t as u64));
        let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(cfg.low..cfg.high)).collect();
        let psi = problem.psi(raw)?;
        let eval = match evaluate_objective(problem, &psi, &cfg.eval, derive_seed(cfg.seed, t as u64, 1)) {
            Ok(eval) => eval,
            Err(e) => {
                run.stop = StopReason::Error;
                run.error = Some(e);
                return Ok(run);
            }
        };
        samples += eval.samples_charged;
        wall += eval.seconds;
        if eval.val_loss < best {
            best = eval.val_loss;
            run.final_psi = eval.psi_candidate.clone();
        }
        run.history.push(IterationRecord {
            iteration: t,
            cumulative_samples: samples,
            val_loss: eval.val_loss,
            best_val_loss: best,
            test_loss: eval.test_loss,
            psi: eval.psi_candidate.clone(),
            grad_norm: 0.0,
            cg_iters: 0,
            cg_residual: 0.0,
            wall_seconds: wall,
        });
        run.evaluations.push(eval);
        if let Some(stop) = finish(&run.history, &cfg.budget) {
            run.stop = stop;
            return Ok(run);
        }
    }
    Ok(run)
}
