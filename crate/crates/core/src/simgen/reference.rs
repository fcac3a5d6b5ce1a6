//! Shipped simulator definitions.

use super::{inverse_softplus, LatentBlock, Renderer, SimulatorSpec, Source};

/// Hidden `(mean, scale)` of the gaussian-match task.
pub const GAUSSIAN_MATCH_TARGET: (f64, f64) = (2.0, 0.5);

/// `u ~ N(mu, sigma^2)` rendered as the regression pair `(u, u^2)`.
///
/// A linear model fitted to `y = x^2` under inputs `N(mu, sigma^2)` converges
/// to intercept `sigma^2 - mu^2` and slope `2 mu`, so the validation loss
/// pins down both parameters.
pub fn gaussian_match() -> SimulatorSpec {
    let (mean, scale) = GAUSSIAN_MATCH_TARGET;
    SimulatorSpec {
        latent_blocks: vec![LatentBlock::Gaussian { dim: 1, fixed_scale: None }],
        renderer: Renderer::Polynomial {
            coefficients: vec![0.0, 0.0, 1.0],
        },
        hidden_psi: Some(vec![mean, inverse_softplus(scale)]),
    }
}

/// Unit-variance location model: `s ~ N(mu, 1)`, example `(0, s)`. With a
/// squared loss on a constant predictor the inner optimum is the sample mean,
/// which makes every quantity of the bi-level problem available in closed form.
pub fn location_toy(target_mean: f64) -> SimulatorSpec {
    SimulatorSpec {
        latent_blocks: vec![LatentBlock::Gaussian { dim: 1, fixed_scale: Some(1.0) }],
        renderer: Renderer::Location,
        hidden_psi: Some(vec![target_mean]),
    }
}

/// Index of the source that generates the held-out data.
pub const SOURCE_MIXTURE_REAL: usize = 3;

/// Eight-way categorical choice between fixed 2-D linear data sources. Only
/// source 3 matches the held-out data; the others have shifted, rescaled or
/// relabelled inputs.
pub fn source_mixture() -> SimulatorSpec {
    let src = |center: [f64; 2], spread: f64, weights: [f64; 2], bias: f64| Source {
        center: center.to_vec(),
        spread,
        weights: weights.to_vec(),
        bias,
    };
    let sources = vec![
        src([0.0, 0.0], 1.0, [0.0, 0.0], 0.0),
        src([2.0, 2.0], 0.5, [1.0, -0.5], 0.8),
        src([0.0, 0.0], 1.0, [-1.0, 0.5], 0.3),
        src([0.0, 0.0], 1.0, [1.0, -0.5], 0.3),
        src([0.0, 0.0], 1.0, [1.0, -0.5], 2.0),
        src([-1.0, 1.0], 0.3, [2.0, 1.0], -1.0),
        src([0.0, 0.0], 2.0, [0.5, -0.25], 0.15),
        src([1.0, -1.0], 1.0, [0.0, 1.0], 0.0),
    ];
    let mut hidden = vec![0.0; sources.len()];
    hidden[SOURCE_MIXTURE_REAL] = 40.0;
    SimulatorSpec {
        latent_blocks: vec![
            LatentBlock::Categorical { classes: sources.len() },
            LatentBlock::StandardNormal { dim: 2 },
        ],
        renderer: Renderer::SourceMixture { sources },
        hidden_psi: Some(hidden),
    }
}
