#![allow(dead_code)]

use autosim_core::diffcore::{gradient_slice, value, ScalarFunction};
use autosim_core::model::{Activation, LossKind, ModelSpec};
use autosim_core::simgen::{DataPoint, Target};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Largest entrywise difference over the larger infinity norm.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

pub fn central_gradient<F: ScalarFunction>(f: &F, theta: &[f64], h: f64) -> Vec<f64> {
    (0..theta.len())
        .map(|i| {
            let mut p = theta.to_vec();
            let mut m = theta.to_vec();
            p[i] += h;
            m[i] -= h;
            (value(f, &p) - value(f, &m)) / (2.0 * h)
        })
        .collect()
}

/// Directional central difference of the gradient.
pub fn central_hvp<F: ScalarFunction>(f: &F, theta: &[f64], v: &[f64], h: f64) -> Vec<f64> {
    let shifted = |s: f64| {
        let t: Vec<f64> = theta.iter().zip(v).map(|(a, b)| a + s * b).collect();
        gradient_slice(f, &t).unwrap()
    };
    let (gp, gm) = (shifted(h), shifted(-h));
    gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}

/// A random two-layer network with matching data and parameters.
pub fn random_mlp(seed: u64, points: usize) -> (ModelSpec, Vec<DataPoint>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_in = rng.random_range(1..=3);
    let hidden = rng.random_range(2..=5);
    let d_out = rng.random_range(1..=3);
    let loss = if rng.random_bool(0.5) { LossKind::Mse } else { LossKind::CrossEntropy };
    let spec = ModelSpec::new(vec![d_in, hidden, d_out], Activation::Tanh, loss);
    let data = (0..points)
        .map(|_| DataPoint {
            input: (0..d_in).map(|_| rng.random_range(-1.5..1.5)).collect(),
            target: match loss {
                LossKind::Mse => Target::Real((0..d_out).map(|_| rng.random_range(-1.0..1.0)).collect()),
                LossKind::CrossEntropy => Target::Class(rng.random_range(0..d_out)),
            },
        })
        .collect();
    let theta = (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
    (spec, data, theta)
}

pub fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}
