//! A simulator, a task model and held-out data bundled into one problem.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::derive_seed;
use crate::model::ModelSpec;
use crate::simgen::{
    self, inverse_softplus, DataPoint, SimParams, Simulator, SimulatorSpec,
};

const VAL_STREAM: u64 = 0x0076_616c;
const TEST_STREAM: u64 = 0x7465_7374;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskName {
    LocationToy,
    GaussianMatch,
    SourceMixture,
}

impl TaskName {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskName::LocationToy => "location-toy",
            TaskName::GaussianMatch => "gaussian-match",
            TaskName::SourceMixture => "source-mixture",
        }
    }
}

impl FromStr for TaskName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "location-toy" => Ok(TaskName::LocationToy),
            "gaussian-match" => Ok(TaskName::GaussianMatch),
            "source-mixture" => Ok(TaskName::SourceMixture),
            other => Err(invalid(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub name: String,
    pub simulator: Simulator,
    pub model: ModelSpec,
    pub val_data: Vec<DataPoint>,
    pub test_data: Vec<DataPoint>,
    pub initial_psi: SimParams,
    /// Box that random search draws raw parameters from.
    pub prior_box: (f64, f64),
}

/// Sizes and seed for the held-out sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_held_out")]
    pub val_size: usize,
    #[serde(default = "default_held_out")]
    pub test_size: usize,
    #[serde(default)]
    pub data_seed: u64,
}

fn default_held_out() -> usize {
    1024
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            val_size: default_held_out(),
            test_size: default_held_out(),
            data_seed: 0,
        }
    }
}

impl Problem {
    /// Held-out sets drawn from the simulator's hidden parameters.
    pub fn from_hidden(
        name: impl Into<String>,
        spec: SimulatorSpec,
        model: ModelSpec,
        initial_psi: Vec<f64>,
        prior_box: (f64, f64),
        data: &DataConfig,
    ) -> Result<Self> {
        let simulator = Simulator::new(spec)?;
        let mut val_rng = ChaCha8Rng::seed_from_u64(derive_seed(data.data_seed, VAL_STREAM, 0));
        let mut test_rng = ChaCha8Rng::seed_from_u64(derive_seed(data.data_seed, TEST_STREAM, 0));
        let val_data = simulator.reference_data(data.val_size, &mut val_rng)?;
        let test_data = simulator.reference_data(data.test_size, &mut test_rng)?;
        Self::new(name, simulator, model, val_data, test_data, initial_psi, prior_box)
    }

    pub fn new(
        name: impl Into<String>,
        simulator: Simulator,
        model: ModelSpec,
        val_data: Vec<DataPoint>,
        test_data: Vec<DataPoint>,
        initial_psi: Vec<f64>,
        prior_box: (f64, f64),
    ) -> Result<Self> {
        model.validate()?;
        if val_data.is_empty() {
            return Err(invalid("validation set is empty"));
        }
        model.check_data(&val_data)?;
        model.check_data(&test_data)?;
        let (d_in, d_out) = simulator.spec().data_dims();
        if d_in != model.layer_sizes[0] || d_out != *model.layer_sizes.last().unwrap() {
            return Err(invalid(format!(
                "simulator renders {d_in} -> {d_out} examples but the model is {:?}",
                model.layer_sizes
            )));
        }
        if !(prior_box.0 < prior_box.1) {
            return Err(invalid("prior box must have low < high"));
        }
        let initial_psi = simulator.spec().params(initial_psi)?;
        Ok(Self {
            name: name.into(),
            simulator,
            model,
            val_data,
            test_data,
            initial_psi,
            prior_box,
        })
    }

    pub fn psi(&self, raw: Vec<f64>) -> Result<SimParams> {
        self.simulator.spec().params(raw)
    }

    pub fn ledger_total(&self) -> u64 {
        self.simulator.ledger().total()
    }
}

/// Constant predictor (frozen weight, trainable bias) on `s ~ N(mu, 1)`,
/// validated on the single point `target_mean`. Starts at `mu = 1`.
pub fn location_toy(target_mean: f64, initial_mean: f64) -> Result<Problem> {
    let spec = simgen::location_toy(target_mean);
    let mut model = ModelSpec::linear(1, 1);
    model.trainable = vec![false, true];
    let val = vec![DataPoint::regression(vec![0.0], vec![target_mean])];
    Problem::new(
        TaskName::LocationToy.as_str(),
        Simulator::new(spec)?,
        model,
        val.clone(),
        val,
        vec![initial_mean],
        (-3.0, 3.0),
    )
}

pub fn builtin(name: TaskName, data: &DataConfig) -> Result<Problem> {
    match name {
        TaskName::LocationToy => location_toy(0.0, 1.0),
        TaskName::GaussianMatch => Problem::from_hidden(
            name.as_str(),
            simgen::gaussian_match(),
            ModelSpec::linear(1, 1),
            vec![0.0, inverse_softplus(1.0)],
            (-3.0, 3.0),
            data,
        ),
        TaskName::SourceMixture => {
            let spec = simgen::source_mixture();
            let m = spec.param_dim();
            Problem::from_hidden(
                name.as_str(),
                spec,
                ModelSpec::linear(2, 1),
                vec![0.0; m],
                (-3.0, 3.0),
                data,
            )
        }
    }
}
