use std::path::Path;

use serde::{Deserialize, Serialize};

use super::oracle::OracleConfig;
use crate::autosim::{AutoSimConfig, Budget, DEFAULT_CLIP_NORM};
use crate::baselines::{BlackBoxConfig, LtsConfig, RandomSearchConfig, DEFAULT_POLICY_SIGMA};
use crate::error::{Error, Result};
use crate::hypergrad::{ApproxMode, CgConfig, HypergradConfig, DEFAULT_DAMPING};
use crate::model::{ModelSpec, TrainConfig};
use crate::optim::OptimizerConfig;
use crate::simgen::{SimulatorSpec, Simulator};
use crate::task::{builtin, DataConfig, Problem, TaskName};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Autosimulate,
    Lts,
    Random,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Autosimulate => "autosimulate",
            Method::Lts => "lts",
            Method::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypergradSection {
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default)]
    pub cg: CgConfig,
}

fn default_damping() -> f64 {
    DEFAULT_DAMPING
}

impl Default for HypergradSection {
    fn default() -> Self {
        Self { damping: DEFAULT_DAMPING, cg: CgConfig::default() }
    }
}

/// Training used by black-box objective evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlackBoxSection {
    pub train: TrainConfig,
    #[serde(default)]
    pub warm_start: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LtsSection {
    #[serde(default = "default_candidates")]
    pub candidates: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_candidates() -> usize {
    4
}
fn default_sigma() -> f64 {
    DEFAULT_POLICY_SIGMA
}

impl Default for LtsSection {
    fn default() -> Self {
        Self { candidates: default_candidates(), sigma: default_sigma() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomSection {
    #[serde(default = "default_low")]
    pub low: f64,
    #[serde(default = "default_high")]
    pub high: f64,
}

fn default_low() -> f64 {
    -3.0
}
fn default_high() -> f64 {
    3.0
}

impl Default for RandomSection {
    fn default() -> Self {
        Self { low: default_low(), high: default_high() }
    }
}

/// One experiment, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Output file stem; defaults to the config file stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub task: TaskName,
    pub method: Method,
    #[serde(default)]
    pub mode: ApproxMode,
    #[serde(default)]
    pub seed: u64,
    /// Samples generated per iteration (per candidate for black-box methods).
    pub batch_size: usize,
    /// Fine-tuning per outer iteration; black-box evaluations reuse it
    /// unless `[blackbox]` is given.
    pub inner: TrainConfig,
    pub outer: OptimizerConfig,
    #[serde(default = "default_clip", skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub reset_theta: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_subsample: Option<usize>,
    pub budget: Budget,
    #[serde(default)]
    pub hypergrad: HypergradSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blackbox: Option<BlackBoxSection>,
    #[serde(default)]
    pub lts: LtsSection,
    #[serde(default)]
    pub random: RandomSection,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    /// Replaces the task's simulator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulator: Option<SimulatorSpec>,
    /// Replaces the task's model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_psi: Option<Vec<f64>>,
}

fn default_clip() -> Option<f64> {
    Some(DEFAULT_CLIP_NORM)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.budget.iterations == 0 {
            return bad("budget.iterations must be positive");
        }
        if self.budget.wall_seconds.is_some_and(|s| !(s > 0.0)) {
            return bad("budget.wall_seconds must be positive");
        }
        if self.method != Method::Autosimulate && self.blackbox_train().epochs == 0 {
            return bad("black-box evaluations need at least one training epoch");
        }
        if self.lts.candidates < 2 {
            return bad("lts.candidates must be at least 2");
        }
        if !(self.random.low < self.random.high) {
            return bad("random.low must be below random.high");
        }
        Ok(())
    }

    /// The file stem used for outputs.
    pub fn run_name(&self, fallback: &str) -> String {
        self.name.clone().unwrap_or_else(|| fallback.to_string())
    }

    pub fn problem(&self) -> Result<Problem> {
        let base = builtin(self.task, &self.data)?;
        if self.simulator.is_none() && self.model.is_none() && self.initial_psi.is_none() {
            return Ok(base);
        }
        let spec = self.simulator.clone().unwrap_or_else(|| base.simulator.spec().clone());
        let model = self.model.clone().unwrap_or_else(|| base.model.clone());
        let initial = match &self.initial_psi {
            Some(raw) => raw.clone(),
            None if spec.param_dim() == base.initial_psi.dim() => base.initial_psi.raw().to_vec(),
            None => vec![0.0; spec.param_dim()],
        };
        if self.simulator.is_some() && spec.hidden_psi.is_some() {
            Problem::from_hidden(base.name, spec, model, initial, base.prior_box, &self.data)
        } else {
            Problem::new(
                base.name,
                Simulator::new(spec)?,
                model,
                base.val_data,
                base.test_data,
                initial,
                base.prior_box,
            )
        }
    }

    pub fn hypergrad_config(&self) -> HypergradConfig {
        HypergradConfig { mode: self.mode, cg: self.hypergrad.cg, damping: self.hypergrad.damping }
    }

    pub fn autosim_config(&self) -> AutoSimConfig {
        AutoSimConfig {
            batch_size: self.batch_size,
            inner: self.inner,
            hypergrad: self.hypergrad_config(),
            outer: self.outer,
            clip_norm: self.clip_norm,
            reset_theta: self.reset_theta,
            val_subsample: self.val_subsample,
            budget: self.budget,
            seed: self.seed,
        }
    }

    fn blackbox_train(&self) -> TrainConfig {
        self.blackbox.map_or(self.inner, |b| b.train)
    }

    pub fn blackbox_config(&self) -> BlackBoxConfig {
        BlackBoxConfig {
            dataset_size: self.batch_size,
            train: self.blackbox_train(),
            init_seed: self.seed,
            warm_start: self.blackbox.is_some_and(|b| b.warm_start),
        }
    }

    pub fn lts_config(&self) -> LtsConfig {
        LtsConfig {
            candidates: self.lts.candidates,
            sigma: self.lts.sigma,
            optimizer: self.outer,
            eval: self.blackbox_config(),
            budget: self.budget,
            seed: self.seed,
        }
    }

    pub fn random_config(&self) -> RandomSearchConfig {
        RandomSearchConfig {
            low: self.random.low,
            high: self.random.high,
            eval: self.blackbox_config(),
            budget: self.budget,
            seed: self.seed,
        }
    }
}
