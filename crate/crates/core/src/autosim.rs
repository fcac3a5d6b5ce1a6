//! The outer loop: sample one training set, fine-tune on it, take a
//! hypergradient step on the simulator parameters, repeat.

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::ParamVector;
use crate::error::{invalid, Error, Result};
use crate::hypergrad::{hypergradient, HypergradConfig, HypergradInputs};
use crate::linalg::{all_finite, derive_seed, norm, scale};
use crate::model::{dataset_loss, fine_tune, init_model, TrainConfig};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::simgen::{DataPoint, SimParams};
use crate::task::Problem;

const SAMPLE_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const VAL_STREAM: u64 = 3;
const INIT_STREAM: u64 = 4;

pub const DEFAULT_CLIP_NORM: f64 = 10.0;

/// Random stream that draws the training set of iteration `t`.
pub fn sample_rng(seed: u64, t: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, SAMPLE_STREAM, t as u64))
}

/// When a run stops. Iterations are always bounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    pub iterations: usize,
    #[serde(default)]
    pub wall_seconds: Option<f64>,
    #[serde(default)]
    pub target_val_loss: Option<f64>,
}

impl Budget {
    pub fn iterations(n: usize) -> Self {
        Self { iterations: n, wall_seconds: None, target_val_loss: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(invalid("iteration budget must be at least 1"));
        }
        if self.wall_seconds.is_some_and(|s| !(s > 0.0)) {
            return Err(invalid("wall-clock budget must be positive"));
        }
        if self.target_val_loss.is_some_and(|t| !t.is_finite()) {
            return Err(invalid("target validation loss must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    Target,
    WallClock,
    Error,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Budget => "budget",
            StopReason::Target => "target",
            StopReason::WallClock => "wall_clock",
            StopReason::Error => "error",
        }
    }
}

/// One row of progress, shared by every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cumulative_samples: u64,
    pub val_loss: f64,
    pub best_val_loss: f64,
    pub test_loss: f64,
    pub psi: Vec<f64>,
    pub grad_norm: f64,
    pub cg_iters: usize,
    pub cg_residual: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoSimConfig {
    /// Training-set size `K` generated per iteration.
    pub batch_size: usize,
    /// Fine-tuning schedule; zero epochs skips fine-tuning.
    pub inner: TrainConfig,
    pub hypergrad: HypergradConfig,
    pub outer: OptimizerConfig,
    /// Norm cap on the outer gradient; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Re-initialize the task model every iteration instead of warm starting.
    pub reset_theta: bool,
    /// Use a random subset of this many validation points per hypergradient.
    pub val_subsample: Option<usize>,
    pub budget: Budget,
    pub seed: u64,
}

impl AutoSimConfig {
    pub fn new(batch_size: usize, inner: TrainConfig, outer: OptimizerConfig, iterations: usize) -> Self {
        Self {
            batch_size,
            inner,
            hypergrad: HypergradConfig::default(),
            outer,
            clip_norm: Some(DEFAULT_CLIP_NORM),
            reset_theta: false,
            val_subsample: None,
            budget: Budget::iterations(iterations),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch size K must be positive"));
        }
        if self.inner.epochs > 0 {
            self.inner.validate()?;
        }
        self.hypergrad.cg.validate()?;
        if !(self.hypergrad.damping >= 0.0 && self.hypergrad.damping.is_finite()) {
            return Err(invalid("damping must be finite and non-negative"));
        }
        if !(self.outer.step_size >= 0.0 && self.outer.step_size.is_finite()) {
            return Err(invalid("outer step size must be finite and non-negative"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(invalid("clip norm must be positive"));
        }
        if self.val_subsample == Some(0) {
            return Err(invalid("validation subsample must be positive"));
        }
        self.budget.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopState {
    pub psi: SimParams,
    pub theta: ParamVector,
    pub iteration: usize,
    pub cumulative_samples: u64,
    pub history: Vec<IterationRecord>,
    pub optimizer: OptimizerState,
    /// Last change applied to raw `psi`.
    pub delta_psi: Vec<f64>,
    pub wall_seconds: f64,
}

impl LoopState {
    pub fn best_val_loss(&self) -> f64 {
        self.history.last().map_or(f64::INFINITY, |r| r.best_val_loss)
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub state: LoopState,
    pub stop: StopReason,
    /// The step error that aborted the run, if any.
    pub error: Option<Error>,
}

pub struct AutoSimulate<'a> {
    problem: &'a Problem,
    cfg: AutoSimConfig,
}

impl<'a> AutoSimulate<'a> {
    pub fn new(problem: &'a Problem, cfg: AutoSimConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.val_subsample.is_some_and(|n| n > problem.val_data.len()) {
            return Err(invalid("validation subsample exceeds the validation set"));
        }
        Ok(Self { problem, cfg })
    }

    pub fn config(&self) -> &AutoSimConfig {
        &self.cfg
    }

    pub fn initial_state(&self) -> Result<LoopState> {
        self.state_from(self.problem.initial_psi.clone())
    }

    pub fn state_from(&self, psi: SimParams) -> Result<LoopState> {
        if psi.structure() != self.problem.initial_psi.structure() {
            return Err(invalid("parameters do not belong to this simulator"));
        }
        let theta = self.fresh_theta(0)?;
        Ok(LoopState {
            optimizer: OptimizerState::new(psi.dim()),
            delta_psi: vec![0.0; psi.dim()],
            psi,
            theta,
            iteration: 0,
            cumulative_samples: 0,
            history: Vec::new(),
            wall_seconds: 0.0,
        })
    }

    fn fresh_theta(&self, t: usize) -> Result<ParamVector> {
        init_model(&self.problem.model, derive_seed(self.cfg.seed, INIT_STREAM, t as u64))
    }

    fn validation_set(&self, t: usize) -> Vec<DataPoint> {
        let val = &self.problem.val_data;
        match self.cfg.val_subsample {
            Some(n) if n < val.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, VAL_STREAM, t as u64));
                sample(&mut rng, val.len(), n).iter().map(|i| val[i].clone()).collect()
            }
            _ => val.clone(),
        }
    }

    /// One outer iteration. `state` is left as it was on error.
    pub fn step(&self, state: &LoopState) -> Result<LoopState> {
        let start = Instant::now();
        let t = state.iteration;
        let cfg = &self.cfg;
        let problem = self.problem;

        let mut rng = sample_rng(cfg.seed, t);
        let (latents, train) = problem.simulator.generate(&state.psi, cfg.batch_size, &mut rng)?;

        let theta0 = if cfg.reset_theta { self.fresh_theta(t + 1)? } else { state.theta.clone() };
        let theta = if cfg.inner.epochs > 0 {
            let inner = TrainConfig { seed: derive_seed(cfg.seed, TRAIN_STREAM, t as u64), ..cfg.inner };
            fine_tune(&theta0, &train, &inner, &problem.model)?
        } else {
            theta0
        };

        let val = self.validation_set(t);
        let report = hypergradient(
            &HypergradInputs {
                psi: &state.psi,
                theta_hat: &theta,
                latents: &latents,
                sim: problem.simulator.spec(),
                model: &problem.model,
                val_data: &val,
            },
            &cfg.hypergrad,
        )?;

        let grad_norm = norm(&report.grad_psi);
        let grad = match cfg.clip_norm {
            Some(c) if grad_norm > c => scale(c / grad_norm, &report.grad_psi),
            _ => report.grad_psi.clone(),
        };
        let mut optimizer = state.optimizer.clone();
        let mut raw = state.psi.raw().to_vec();
        let delta_psi = optimizer.step(&cfg.outer, &mut raw, &grad, None);
        if !all_finite(&raw) {
            return Err(Error::NumericalFailure { op: "outer update" });
        }
        let psi = state.psi.with_raw(raw)?;

        let val_loss = dataset_loss(&theta, &problem.val_data, &problem.model)?;
        let test_loss = if problem.test_data.is_empty() {
            f64::NAN
        } else {
            dataset_loss(&theta, &problem.test_data, &problem.model)?
        };
        let cumulative_samples = state.cumulative_samples + cfg.batch_size as u64;
        let wall_seconds = state.wall_seconds + start.elapsed().as_secs_f64();

        let mut history = state.history.clone();
        history.push(IterationRecord {
            iteration: t,
            cumulative_samples,
            val_loss,
            best_val_loss: val_loss.min(state.best_val_loss()),
            test_loss,
            // the record describes the iterate the model was trained on
            psi: state.psi.raw().to_vec(),
            grad_norm,
            cg_iters: report.cg_iters(),
            cg_residual: report.cg.as_ref().map_or(0.0, |s| s.cg_residual),
            wall_seconds,
        });
        Ok(LoopState {
            psi,
            theta,
            iteration: t + 1,
            cumulative_samples,
            history,
            optimizer,
            delta_psi,
            wall_seconds,
        })
    }

    pub fn run(&self) -> Result<RunOutcome> {
        Ok(self.run_from(self.initial_state()?))
    }

    /// Steps until the budget, the target or the wall-clock limit is hit.
    /// A failing step ends the run with the history gathered so far.
    pub fn run_from(&self, mut state: LoopState) -> RunOutcome {
        let budget = &self.cfg.budget;
        let end = state.iteration + budget.iterations;
        while state.iteration < end {
            match self.step(&state) {
                Ok(next) => state = next,
                Err(e) => return RunOutcome { state, stop: StopReason::Error, error: Some(e) },
            }
            let last = state.history.last().expect("step appends a record");
            if budget.target_val_loss.is_some_and(|target| last.val_loss <= target) {
                return RunOutcome { state, stop: StopReason::Target, error: None };
            }
            if budget.wall_seconds.is_some_and(|limit| state.wall_seconds >= limit) {
                return RunOutcome { state, stop: StopReason::WallClock, error: None };
            }
        }
        RunOutcome { state, stop: StopReason::Budget, error: None }
    }
}
