//! Stochastic simulators split into a parametric latent distribution
//! `q_psi(s)` and a deterministic renderer `zeta = r(s)`.
//!
//! The distribution over rendered data is the pushforward of `q_psi` through
//! `r`. Nothing here ever evaluates that pushforward density: gradients with
//! respect to `psi` are taken in latent space with the score function
//! `d/dpsi log q_psi(s)`, which only needs the latent density.
//!
//! `psi` is stored unconstrained. Gaussian scales go through a softplus
//! (floored at [`SCALE_FLOOR`]) and categorical logits through a softmax.

mod reference;

pub use reference::{
    gaussian_match, location_toy, source_mixture, GAUSSIAN_MATCH_TARGET, SOURCE_MIXTURE_REAL,
};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const SCALE_FLOOR: f64 = 1e-4;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// One independent factor of `q_psi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LatentBlock {
    /// Diagonal Gaussian. Learns its mean and, unless `fixed_scale` is set,
    /// its per-dimension scale.
    Gaussian {
        dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fixed_scale: Option<f64>,
    },
    /// Categorical over `classes` outcomes, parameterized by logits.
    Categorical { classes: usize },
    /// Parameter-free standard normal noise.
    StandardNormal { dim: usize },
}

impl LatentBlock {
    fn param_len(&self) -> usize {
        match *self {
            LatentBlock::Gaussian { dim, fixed_scale: None } => 2 * dim,
            LatentBlock::Gaussian { dim, fixed_scale: Some(_) } => dim,
            LatentBlock::Categorical { classes } => classes,
            LatentBlock::StandardNormal { .. } => 0,
        }
    }

    fn continuous_len(&self) -> usize {
        match *self {
            LatentBlock::Gaussian { dim, .. } | LatentBlock::StandardNormal { dim } => dim,
            LatentBlock::Categorical { .. } => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    GaussianMean,
    GaussianLogScale,
    CategoricalLogits,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub kind: ParamKind,
    pub offset: usize,
    pub len: usize,
}

/// One data source of the source-mixture renderer: inputs are
/// `center + spread * u` and labels `weights . x + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Source {
    pub center: Vec<f64>,
    pub spread: f64,
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Deterministic map from a latent draw to a labelled example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Renderer {
    /// `x = u`, `y = sum_i sum_j c_j u_i^j`. No coefficients gives `y = 0`.
    Polynomial { coefficients: Vec<f64> },
    /// `x = 0`, `y = u`: the example is the draw itself, as seen by a
    /// constant predictor.
    Location,
    /// `s = (j, u)`: render source `j` at local noise `u`.
    SourceMixture { sources: Vec<Source> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorSpec {
    pub latent_blocks: Vec<LatentBlock>,
    pub renderer: Renderer,
    /// Ground-truth parameters used to generate validation and test data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_psi: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Real(Vec<f64>),
    Class(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub input: Vec<f64>,
    pub target: Target,
}

impl DataPoint {
    pub fn regression(input: Vec<f64>, target: Vec<f64>) -> Self {
        Self {
            input,
            target: Target::Real(target),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LatentSample {
    pub continuous: Vec<f64>,
    pub discrete: Vec<usize>,
}

/// Simulator parameters in unconstrained form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    raw: Vec<f64>,
    structure: Vec<LatentBlock>,
    blocks: Vec<ParamBlock>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProjectedBlock {
    Gaussian { mean: Vec<f64>, scale: Vec<f64> },
    Categorical { probs: Vec<f64> },
    StandardNormal { dim: usize },
}

/// Constrained view of [`SimParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    pub blocks: Vec<ProjectedBlock>,
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    assert!(y > 0.0, "softplus is positive");
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn floored_scale(raw: f64) -> (f64, f64) {
    let s = softplus(raw);
    if s < SCALE_FLOOR {
        (SCALE_FLOOR, 0.0)
    } else {
        (s, sigmoid(raw))
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_at(logits: &[f64], j: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[j] - lse
}

impl SimulatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_blocks.is_empty() {
            return Err(invalid("simulator has no latent blocks"));
        }
        for b in &self.latent_blocks {
            match *b {
                LatentBlock::Gaussian { dim, fixed_scale } => {
                    if dim == 0 {
                        return Err(invalid("gaussian block with zero dimension"));
                    }
                    if fixed_scale.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
                        return Err(invalid("fixed gaussian scale must be positive"));
                    }
                }
                LatentBlock::Categorical { classes } if classes < 2 => {
                    return Err(invalid("categorical block needs at least two classes"));
                }
                LatentBlock::StandardNormal { dim: 0 } => {
                    return Err(invalid("noise block with zero dimension"));
                }
                _ => {}
            }
        }
        let cont = self.continuous_len();
        let n_cat = self.categorical_classes().len();
        match &self.renderer {
            Renderer::Polynomial { .. } | Renderer::Location => {
                if cont == 0 || n_cat != 0 {
                    return Err(invalid(
                        "polynomial/location renderers need continuous latents only",
                    ));
                }
            }
            Renderer::SourceMixture { sources } => {
                let classes = self.categorical_classes();
                if classes.len() != 1 || classes[0] != sources.len() {
                    return Err(invalid(
                        "source-mixture renderer needs one categorical block with one class per source",
                    ));
                }
                for (j, src) in sources.iter().enumerate() {
                    if src.center.len() != cont || src.weights.len() != cont {
                        return Err(invalid(format!(
                            "source {j} has dimension {} but the noise has {cont}",
                            src.center.len()
                        )));
                    }
                }
            }
        }
        if let Some(h) = &self.hidden_psi {
            self.params(h.clone())?;
        }
        Ok(())
    }

    pub fn param_dim(&self) -> usize {
        self.latent_blocks.iter().map(LatentBlock::param_len).sum()
    }

    fn continuous_len(&self) -> usize {
        self.latent_blocks.iter().map(LatentBlock::continuous_len).sum()
    }

    fn categorical_classes(&self) -> Vec<usize> {
        self.latent_blocks
            .iter()
            .filter_map(|b| match *b {
                LatentBlock::Categorical { classes } => Some(classes),
                _ => None,
            })
            .collect()
    }

    /// Input and target dimensions of rendered examples.
    pub fn data_dims(&self) -> (usize, usize) {
        match &self.renderer {
            Renderer::Polynomial { .. } => (self.continuous_len(), 1),
            Renderer::Location => (1, self.continuous_len()),
            Renderer::SourceMixture { .. } => (self.continuous_len(), 1),
        }
    }

    pub fn params(&self, raw: Vec<f64>) -> Result<SimParams> {
        SimParams::new(self.latent_blocks.clone(), raw)
    }

    pub fn hidden_params(&self) -> Option<Result<SimParams>> {
        self.hidden_psi.clone().map(|h| self.params(h))
    }
}

impl SimParams {
    pub fn new(structure: Vec<LatentBlock>, raw: Vec<f64>) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        for b in &structure {
            match *b {
                LatentBlock::Gaussian { dim, fixed_scale } => {
                    blocks.push(ParamBlock { kind: ParamKind::GaussianMean, offset, len: dim });
                    offset += dim;
                    if fixed_scale.is_none() {
                        blocks.push(ParamBlock { kind: ParamKind::GaussianLogScale, offset, len: dim });
                        offset += dim;
                    }
                }
                LatentBlock::Categorical { classes } => {
                    blocks.push(ParamBlock { kind: ParamKind::CategoricalLogits, offset, len: classes });
                    offset += classes;
                }
                LatentBlock::StandardNormal { .. } => {}
            }
        }
        if offset != raw.len() {
            return Err(invalid(format!(
                "simulator expects {offset} parameters, got {}",
                raw.len()
            )));
        }
        if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("simulator parameter {i} is not finite")));
        }
        Ok(Self { raw, structure, blocks })
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn dim(&self) -> usize {
        self.raw.len()
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn structure(&self) -> &[LatentBlock] {
        &self.structure
    }

    pub fn with_raw(&self, raw: Vec<f64>) -> Result<Self> {
        Self::new(self.structure.clone(), raw)
    }

    /// Indices of raw parameters that are categorical logits, grouped per block.
    pub fn logit_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.blocks
            .iter()
            .filter(|b| b.kind == ParamKind::CategoricalLogits)
            .map(|b| b.offset..b.offset + b.len)
            .collect()
    }

    /// Walks latent blocks alongside their raw parameter offsets.
    fn walk(&self) -> impl Iterator<Item = (&LatentBlock, usize)> + '_ {
        let mut offset = 0;
        self.structure.iter().map(move |b| {
            let at = offset;
            offset += b.param_len();
            (b, at)
        })
    }
}

/// Maps raw parameters onto their constrained domain.
pub fn project(psi: &SimParams) -> Projected {
    let raw = psi.raw();
    let blocks = psi
        .walk()
        .map(|(b, at)| match *b {
            LatentBlock::Gaussian { dim, fixed_scale } => {
                let mean = raw[at..at + dim].to_vec();
                let scale = match fixed_scale {
                    Some(s) => vec![s; dim],
                    None => raw[at + dim..at + 2 * dim]
                        .iter()
                        .map(|&r| floored_scale(r).0)
                        .collect(),
                };
                ProjectedBlock::Gaussian { mean, scale }
            }
            LatentBlock::Categorical { classes } => ProjectedBlock::Categorical {
                probs: softmax(&raw[at..at + classes]),
            },
            LatentBlock::StandardNormal { dim } => ProjectedBlock::StandardNormal { dim },
        })
        .collect();
    Projected { blocks }
}

/// `k` independent draws from `q_psi`.
///
/// The number of random variates consumed per draw does not depend on `psi`,
/// so two parameter vectors sampled with identically seeded streams see
/// common random numbers.
pub fn sample_latents<R: Rng + ?Sized>(psi: &SimParams, k: usize, rng: &mut R) -> Vec<LatentSample> {
    let proj = project(psi);
    (0..k)
        .map(|_| {
            let mut s = LatentSample::default();
            for block in &proj.blocks {
                match block {
                    ProjectedBlock::Gaussian { mean, scale } => {
                        for (m, sd) in mean.iter().zip(scale) {
                            let z: f64 = StandardNormal.sample(rng);
                            s.continuous.push(m + sd * z);
                        }
                    }
                    ProjectedBlock::Categorical { probs } => {
                        let u: f64 = rng.random();
                        let mut cum = 0.0;
                        let mut pick = probs.len() - 1;
                        for (j, p) in probs.iter().enumerate() {
                            cum += p;
                            if u < cum {
                                pick = j;
                                break;
                            }
                        }
                        s.discrete.push(pick);
                    }
                    ProjectedBlock::StandardNormal { dim } => {
                        for _ in 0..*dim {
                            s.continuous.push(StandardNormal.sample(rng));
                        }
                    }
                }
            }
            s
        })
        .collect()
}

/// `zeta = r(s)`. Pure in `s` and the renderer constants.
pub fn render(s: &LatentSample, spec: &SimulatorSpec) -> Result<DataPoint> {
    match &spec.renderer {
        Renderer::Polynomial { coefficients } => {
            let y: f64 = s
                .continuous
                .iter()
                .map(|&u| coefficients.iter().rev().fold(0.0, |acc, c| acc * u + c))
                .sum();
            Ok(DataPoint::regression(s.continuous.clone(), vec![y]))
        }
        Renderer::Location => Ok(DataPoint::regression(vec![0.0], s.continuous.clone())),
        Renderer::SourceMixture { sources } => {
            let j = *s
                .discrete
                .first()
                .ok_or_else(|| invalid("source-mixture latent has no source index"))?;
            let src = sources
                .get(j)
                .ok_or_else(|| invalid(format!("source index {j} out of range")))?;
            if s.continuous.len() != src.center.len() {
                return Err(invalid("source noise dimension mismatch"));
            }
            let x: Vec<f64> = src
                .center
                .iter()
                .zip(&s.continuous)
                .map(|(c, u)| c + src.spread * u)
                .collect();
            let y = src.bias + x.iter().zip(&src.weights).map(|(a, w)| a * w).sum::<f64>();
            Ok(DataPoint::regression(x, vec![y]))
        }
    }
}

pub fn render_all(latents: &[LatentSample], spec: &SimulatorSpec) -> Result<Vec<DataPoint>> {
    latents.iter().map(|s| render(s, spec)).collect()
}

fn check_support(psi: &SimParams, s: &LatentSample) -> Result<()> {
    let cont: usize = psi.structure.iter().map(LatentBlock::continuous_len).sum();
    let cats: Vec<usize> = psi
        .structure
        .iter()
        .filter_map(|b| match *b {
            LatentBlock::Categorical { classes } => Some(classes),
            _ => None,
        })
        .collect();
    if s.continuous.len() != cont || s.discrete.len() != cats.len() {
        return Err(invalid("latent sample does not match simulator structure"));
    }
    if let Some((i, _)) = s.discrete.iter().zip(&cats).find(|(i, c)| *i >= *c) {
        return Err(invalid(format!("category {i} out of range")));
    }
    Ok(())
}

/// `log q_psi(s)`.
pub fn log_prob(psi: &SimParams, s: &LatentSample) -> Result<f64> {
    check_support(psi, s)?;
    let raw = psi.raw();
    let (mut ci, mut di) = (0, 0);
    let mut total = 0.0;
    for (b, at) in psi.walk() {
        match *b {
            LatentBlock::Gaussian { dim, fixed_scale } => {
                for d in 0..dim {
                    let mean = raw[at + d];
                    let scale = match fixed_scale {
                        Some(sc) => sc,
                        None => floored_scale(raw[at + dim + d]).0,
                    };
                    let z = (s.continuous[ci] - mean) / scale;
                    total += -0.5 * z * z - scale.ln() - LN_SQRT_2PI;
                    ci += 1;
                }
            }
            LatentBlock::Categorical { classes } => {
                total += log_softmax_at(&raw[at..at + classes], s.discrete[di]);
                di += 1;
            }
            LatentBlock::StandardNormal { dim } => {
                for _ in 0..dim {
                    let z = s.continuous[ci];
                    total += -0.5 * z * z - LN_SQRT_2PI;
                    ci += 1;
                }
            }
        }
    }
    Ok(total)
}

/// Score function `d/dpsi log q_psi(s)` with respect to the raw parameters.
pub fn log_prob_grad(psi: &SimParams, s: &LatentSample) -> Result<Vec<f64>> {
    check_support(psi, s)?;
    let raw = psi.raw();
    let mut grad = vec![0.0; raw.len()];
    let (mut ci, mut di) = (0, 0);
    for (b, at) in psi.walk() {
        match *b {
            LatentBlock::Gaussian { dim, fixed_scale } => {
                for d in 0..dim {
                    let mean = raw[at + d];
                    let (scale, dscale) = match fixed_scale {
                        Some(sc) => (sc, 0.0),
                        None => floored_scale(raw[at + dim + d]),
                    };
                    let diff = s.continuous[ci] - mean;
                    grad[at + d] = diff / (scale * scale);
                    if fixed_scale.is_none() {
                        let dlog_dscale = diff * diff / (scale * scale * scale) - 1.0 / scale;
                        grad[at + dim + d] = dlog_dscale * dscale;
                    }
                    ci += 1;
                }
            }
            LatentBlock::Categorical { classes } => {
                let probs = softmax(&raw[at..at + classes]);
                let j = s.discrete[di];
                let mut rest = 0.0;
                for (i, p) in probs.iter().enumerate() {
                    if i != j {
                        grad[at + i] = -p;
                        rest += p;
                    }
                }
                // 1 - p_j without the cancellation when p_j is near one
                grad[at + j] = rest;
                di += 1;
            }
            LatentBlock::StandardNormal { dim } => ci += dim,
        }
    }
    Ok(grad)
}

/// Shared counter of simulator-generated training examples.
#[derive(Debug, Clone, Default)]
pub struct SampleLedger(Arc<AtomicU64>);

impl SampleLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&self, n: usize) {
        self.0.fetch_add(n as u64, Ordering::SeqCst);
    }

    pub fn total(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// A simulator spec bound to the ledger that audits every training example
/// it generates.
#[derive(Debug, Clone)]
pub struct Simulator {
    spec: SimulatorSpec,
    ledger: SampleLedger,
}

impl Simulator {
    pub fn new(spec: SimulatorSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            ledger: SampleLedger::new(),
        })
    }

    pub fn spec(&self) -> &SimulatorSpec {
        &self.spec
    }

    pub fn ledger(&self) -> &SampleLedger {
        &self.ledger
    }

    /// Samples and renders a training set of size `k`, charging the ledger.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        psi: &SimParams,
        k: usize,
        rng: &mut R,
    ) -> Result<(Vec<LatentSample>, Vec<DataPoint>)> {
        let latents = sample_latents(psi, k, rng);
        let data = render_all(&latents, &self.spec)?;
        self.ledger.charge(data.len());
        Ok((latents, data))
    }

    /// Held-out data from the hidden parameters. Not charged: it stands in
    /// for real data rather than simulator output.
    pub fn reference_data<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<DataPoint>> {
        let hidden = self
            .spec
            .hidden_params()
            .ok_or_else(|| invalid("simulator has no hidden parameters"))??;
        render_all(&sample_latents(&hidden, n, rng), &self.spec)
    }
}
