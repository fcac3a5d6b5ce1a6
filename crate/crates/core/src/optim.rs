//! First-order update rules used for both the task model and the simulator
//! parameters.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    pub step_size: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(step_size: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            step_size,
            momentum: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn adam(step_size: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(step_size)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimizerState {
    steps: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl OptimizerState {
    pub fn new(dim: usize) -> Self {
        Self {
            steps: 0,
            first: vec![0.0; dim],
            second: vec![0.0; dim],
        }
    }

    /// Returns the change applied to `params`. Entries with `mask[i] == false`
    /// are left untouched.
    pub fn step(
        &mut self,
        cfg: &OptimizerConfig,
        params: &mut [f64],
        grad: &[f64],
        mask: Option<&[bool]>,
    ) -> Vec<f64> {
        debug_assert_eq!(params.len(), grad.len());
        if self.first.len() != params.len() {
            *self = Self::new(params.len());
        }
        self.steps += 1;
        let mut delta = vec![0.0; params.len()];
        let t = self.steps as i32;
        for i in 0..params.len() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let g = grad[i];
            let d = match cfg.kind {
                OptimizerKind::Sgd => {
                    if cfg.momentum == 0.0 {
                        -cfg.step_size * g
                    } else {
                        self.first[i] = cfg.momentum * self.first[i] + g;
                        -cfg.step_size * self.first[i]
                    }
                }
                OptimizerKind::Adam => {
                    self.first[i] = cfg.beta1 * self.first[i] + (1.0 - cfg.beta1) * g;
                    self.second[i] = cfg.beta2 * self.second[i] + (1.0 - cfg.beta2) * g * g;
                    let m_hat = self.first[i] / (1.0 - cfg.beta1.powi(t));
                    let v_hat = self.second[i] / (1.0 - cfg.beta2.powi(t));
                    -cfg.step_size * m_hat / (v_hat.sqrt() + cfg.eps)
                }
            };
            params[i] += d;
            delta[i] = d;
        }
        delta
    }
}
