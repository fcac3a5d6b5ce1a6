mod common;

use autosim_core::bench::oracle::{oracle_bilevel_grad, train_to_convergence, OracleConfig};
use autosim_core::bench::presets::preset;
use autosim_core::bench::Method;
use autosim_core::diffcore::{gradient_slice, ParamVector};
use autosim_core::hypergrad::{
    cg_solve, delta_theta, hypergradient, hypergradient_with, per_sample_train_grads, val_gradient, ApproxMode,
    CgConfig, DenseOperator, HvpOperator, HypergradConfig, HypergradInputs, NegativeCurvaturePolicy,
};
use autosim_core::linalg::cosine;
use autosim_core::model::{init_model, DatasetObjective, ModelSpec};
use autosim_core::simgen::{log_prob_grad, render_all, DataPoint, SimParams};
use autosim_core::task::{builtin, location_toy, DataConfig, Problem, TaskName};
use common::{central_gradient, random_vec, rel_err};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spd(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.5
}

fn dense(m: &DMatrix<f64>) -> DenseOperator {
    DenseOperator::new(m.nrows(), m.transpose().iter().copied().collect()).unwrap()
}

fn toy_inputs<'a>(problem: &'a Problem, theta: &'a ParamVector, latents: &'a [autosim_core::simgen::LatentSample]) -> HypergradInputs<'a> {
    HypergradInputs {
        psi: &problem.initial_psi,
        theta_hat: theta,
        latents,
        sim: problem.simulator.spec(),
        model: &problem.model,
        val_data: &problem.val_data,
    }
}

/// Toy parameters with the predictor set to `b`.
fn toy_theta(problem: &Problem, b: f64) -> ParamVector {
    ParamVector::new(vec![0.0, b], problem.model.layout()).unwrap()
}

#[test]
fn cg_trivial_systems() {
    let cfg = CgConfig::default();
    let id = DenseOperator::identity(2);
    let step = cg_solve(&HvpOperator::new(&id, 0.0).unwrap(), &[7.0, -2.0], &cfg).unwrap();
    assert!(rel_err(&step.solution, &[7.0, -2.0]) < 1e-12);
    let diag = DenseOperator::diagonal(&[2.0, 4.0]);
    let step = cg_solve(&HvpOperator::new(&diag, 0.0).unwrap(), &[2.0, 4.0], &cfg).unwrap();
    assert!(rel_err(&step.solution, &[1.0, 1.0]) < 1e-12);
    let zero = cg_solve(&HvpOperator::new(&diag, 0.0).unwrap(), &[0.0, 0.0], &cfg).unwrap();
    assert_eq!(zero.solution, vec![0.0, 0.0]);
}

#[test]
fn cg_matches_cholesky_up_to_fifty_dimensions() {
    for (i, n) in [20usize, 20, 35, 50].into_iter().enumerate() {
        let a = spd(n, i as u64);
        let g = random_vec(n, 100 + i as u64);
        let direct = a.clone().cholesky().unwrap().solve(&DVector::from_column_slice(&g));
        let op_data = dense(&a);
        let cfg = CgConfig { max_iters: n, rel_tolerance: 1e-12, ..CgConfig::default() };
        let step = cg_solve(&HvpOperator::new(&op_data, 0.0).unwrap(), &g, &cfg).unwrap();
        assert!(step.iters_used <= n);
        assert!(rel_err(&step.solution, direct.as_slice()) < 1e-8, "n = {n}");
    }
}

#[test]
fn damping_shifts_the_solved_system() {
    let a = spd(10, 7);
    let g = random_vec(10, 8);
    let shifted = &a + DMatrix::identity(10, 10) * 0.3;
    let direct = shifted.cholesky().unwrap().solve(&DVector::from_column_slice(&g));
    let op_data = dense(&a);
    let cfg = CgConfig { rel_tolerance: 1e-12, ..CgConfig::default() };
    let step = cg_solve(&HvpOperator::new(&op_data, 0.3).unwrap(), &g, &cfg).unwrap();
    assert!(rel_err(&step.solution, direct.as_slice()) < 1e-8);
}

#[test]
fn negative_curvature_policies() {
    let indefinite = DenseOperator::diagonal(&[-1.0, 2.0]);
    let op = HvpOperator::new(&indefinite, 0.0).unwrap();
    let truncated = cg_solve(&op, &[1.0, 1.0], &CgConfig::default()).unwrap();
    assert!(truncated.truncated);
    let cfg = CgConfig { negative_curvature: NegativeCurvaturePolicy::RaiseDamping, ..CgConfig::default() };
    let raised = cg_solve(&op, &[1.0, 1.0], &cfg).unwrap();
    assert!(raised.damping > 1.0 && !raised.truncated);
    let d = raised.damping;
    assert!(rel_err(&raised.solution, &[1.0 / (d - 1.0), 1.0 / (d + 2.0)]) < 1e-8);
}

#[test]
fn validation_gradient_single_point() {
    let problem = location_toy(1.0, 0.0).unwrap();
    let g = val_gradient(&toy_theta(&problem, 3.0), &problem.val_data, &problem.model).unwrap();
    assert!((g[1] - 4.0).abs() < 1e-12);
}

#[test]
fn validation_gradient_matches_differences() {
    let (spec, data, theta) = common::random_mlp(42, 10);
    let theta = ParamVector::new(theta, spec.layout()).unwrap();
    let g = val_gradient(&theta, &data, &spec).unwrap();
    let fd = central_gradient(&DatasetObjective::sum(&spec, &data), theta.values(), 1e-5);
    assert!(rel_err(&g, &fd) < 1e-5);
}

#[test]
fn per_sample_gradients_average_to_the_batch_gradient() {
    let problem = builtin(TaskName::SourceMixture, &DataConfig { val_size: 8, test_size: 8, data_seed: 0 }).unwrap();
    let psi = &problem.initial_psi;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut latents, data) = problem.simulator.generate(psi, 8, &mut rng).unwrap();
    let theta = init_model(&problem.model, 4).unwrap();
    let sim = problem.simulator.spec();
    let grads = per_sample_train_grads(&theta, &latents, sim, &problem.model).unwrap();
    let batch = gradient_slice(&DatasetObjective::mean(&problem.model, &data), theta.values()).unwrap();
    for i in 0..batch.len() {
        let mean = grads.iter().map(|g| g[i]).sum::<f64>() / 8.0;
        assert!((mean - batch[i]).abs() <= 1e-12);
    }

    latents.truncate(1);
    let one = per_sample_train_grads(&theta, &latents, sim, &problem.model).unwrap();
    let data = render_all(&latents, sim).unwrap();
    assert_eq!(one[0], gradient_slice(&DatasetObjective::mean(&problem.model, &data), theta.values()).unwrap());
    latents.push(latents[0].clone());
    let twice = per_sample_train_grads(&theta, &latents, sim, &problem.model).unwrap();
    assert_eq!(twice[0], twice[1]);
}

#[test]
fn inner_step_for_each_mode() {
    let id = DenseOperator::identity(2);
    let op = HvpOperator::new(&id, 0.0).unwrap();
    let cfg = CgConfig::default();
    assert_eq!(delta_theta(ApproxMode::Linear, &op, &[1.0, -2.0], &cfg).unwrap(), vec![-1.0, 2.0]);
    let exact = delta_theta(ApproxMode::ExactQuadratic, &op, &[0.5, 3.0], &cfg).unwrap();
    assert!(rel_err(&exact, &[-0.5, -3.0]) < 1e-12);
    let h = DenseOperator::diagonal(&[2.0, 3.0]);
    let op = HvpOperator::new(&h, 0.0).unwrap();
    assert_eq!(delta_theta(ApproxMode::ApproxQuadratic, &op, &[1.0, 1.0], &cfg).unwrap(), vec![-2.0, -3.0]);
}

#[test]
fn newton_step_lands_on_a_quadratic_optimum() {
    // l = (theta - a)^2 around a' = 0.4, optimum a = -1.3
    let spec = ModelSpec::linear(1, 1);
    let data = vec![DataPoint::regression(vec![0.0], vec![-1.3])];
    let mut spec = spec;
    spec.trainable = vec![false, true];
    let theta = [0.0, 0.4];
    let g = gradient_slice(&DatasetObjective::mean(&spec, &data), &theta).unwrap();
    let hessian = autosim_core::hypergrad::TrainingHessian::new(&spec, &data, &theta).unwrap();
    let op = HvpOperator::new(&hessian, 0.0).unwrap();
    let step = delta_theta(ApproxMode::ExactQuadratic, &op, &g, &CgConfig::default()).unwrap();
    assert!((theta[1] + step[1] + 1.3).abs() <= 1e-10);
}

#[test]
fn validation_optimal_model_gets_no_gradient() {
    let problem = location_toy(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (latents, _) = problem.simulator.generate(&problem.initial_psi, 256, &mut rng).unwrap();
    let theta = toy_theta(&problem, 0.0);
    for mode in [ApproxMode::ExactQuadratic, ApproxMode::ApproxQuadratic, ApproxMode::Linear] {
        let report = hypergradient(&toy_inputs(&problem, &theta, &latents), &HypergradConfig::with_mode(mode)).unwrap();
        assert_eq!(report.grad_psi, vec![0.0], "{mode}");
    }
}

/// The estimator at `mu = 1`, target 0, with the predictor at the sample mean.
fn toy_estimate(problem: &Problem, k: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (latents, _) = problem.simulator.generate(&problem.initial_psi, k, &mut rng).unwrap();
    let mean = latents.iter().map(|s| s.continuous[0]).sum::<f64>() / k as f64;
    let theta = toy_theta(problem, mean);
    let cfg = HypergradConfig { damping: 0.0, ..HypergradConfig::default() };
    hypergradient(&toy_inputs(problem, &theta, &latents), &cfg).unwrap().grad_psi[0]
}

#[test]
fn toy_hypergradient_is_twice_the_offset() {
    let problem = location_toy(0.0, 1.0).unwrap();
    let est = toy_estimate(&problem, 10_000, 1);
    assert!((est - 2.0).abs() < 0.1, "{est}");
}

#[test]
fn estimator_is_unbiased_over_independent_runs() {
    let problem = location_toy(0.0, 1.0).unwrap();
    let k = 1000;
    let est: Vec<f64> = (0..200).map(|s| toy_estimate(&problem, k, 10_000 + s)).collect();
    let n = est.len() as f64;
    let mean = est.iter().sum::<f64>() / n;
    let se = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    // E[(s_k - mu)(s_k - mean)] = 1 - 1/K when the model sits at the sample mean
    let analytic = 2.0 * (1.0 - 1.0 / k as f64);
    assert!((mean - analytic).abs() <= 3.0 * se, "mean {mean}, se {se}");
}

#[test]
fn report_is_the_score_weighted_average() {
    let problem = builtin(TaskName::GaussianMatch, &DataConfig { val_size: 64, test_size: 8, data_seed: 1 }).unwrap();
    let psi = &problem.initial_psi;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (latents, _) = problem.simulator.generate(psi, 32, &mut rng).unwrap();
    let theta = init_model(&problem.model, 0).unwrap();
    let inputs = HypergradInputs {
        psi,
        theta_hat: &theta,
        latents: &latents,
        sim: problem.simulator.spec(),
        model: &problem.model,
        val_data: &problem.val_data,
    };
    for mode in ApproxMode::ALL {
        let report = hypergradient(&inputs, &HypergradConfig::with_mode(mode)).unwrap();
        let grads = per_sample_train_grads(&theta, &latents, problem.simulator.spec(), &problem.model).unwrap();
        let mut want = vec![0.0; psi.dim()];
        for ((s, g), d) in latents.iter().zip(&grads).zip(&report.per_sample_dot) {
            let dot: f64 = g.iter().zip(&report.v_psi).map(|(a, b)| a * b).sum();
            assert!((dot - d).abs() <= 1e-10 * dot.abs().max(1.0));
            for (w, score) in want.iter_mut().zip(log_prob_grad(psi, s).unwrap()) {
                *w -= score * dot / latents.len() as f64;
            }
        }
        assert!(rel_err(&report.grad_psi, &want) < 1e-10, "{mode}");
    }
}

#[test]
fn logit_gradient_is_shift_invariant() {
    let problem = builtin(TaskName::SourceMixture, &DataConfig { val_size: 64, test_size: 8, data_seed: 0 }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let raw: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let psi = problem.psi(raw.clone()).unwrap();
    let shifted = problem.psi(raw.iter().map(|r| r + 2.5).collect()).unwrap();
    let (latents, _) = problem.simulator.generate(&psi, 128, &mut rng).unwrap();
    let theta = init_model(&problem.model, 1).unwrap();
    let grad = |p: &SimParams| {
        let inputs = HypergradInputs {
            psi: p,
            theta_hat: &theta,
            latents: &latents,
            sim: problem.simulator.spec(),
            model: &problem.model,
            val_data: &problem.val_data,
        };
        hypergradient(&inputs, &HypergradConfig::default()).unwrap().grad_psi
    };
    let (a, b) = (grad(&psi), grad(&shifted));
    assert!(a.iter().sum::<f64>().abs() < 1e-12);
    assert!(rel_err(&a, &b) < 1e-10);
}

#[test]
fn identity_hessian_makes_exact_and_linear_agree() {
    let problem = builtin(TaskName::GaussianMatch, &DataConfig { val_size: 32, test_size: 8, data_seed: 2 }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (latents, _) = problem.simulator.generate(&problem.initial_psi, 64, &mut rng).unwrap();
    let theta = init_model(&problem.model, 5).unwrap();
    let inputs = HypergradInputs {
        psi: &problem.initial_psi,
        theta_hat: &theta,
        latents: &latents,
        sim: problem.simulator.spec(),
        model: &problem.model,
        val_data: &problem.val_data,
    };
    let id = DenseOperator::identity(theta.len());
    let run = |mode| {
        let cfg = HypergradConfig { mode, damping: 0.0, ..HypergradConfig::default() };
        hypergradient_with(&inputs, &cfg, &id).unwrap().grad_psi
    };
    let (exact, linear) = (run(ApproxMode::ExactQuadratic), run(ApproxMode::Linear));
    for (a, b) in exact.iter().zip(&linear) {
        assert!((a - b).abs() <= 1e-10);
    }
}

#[test]
fn exact_mode_points_along_the_brute_force_gradient() {
    let cfg = preset(TaskName::GaussianMatch, Method::Autosimulate, ApproxMode::ExactQuadratic, 0);
    let problem = cfg.problem().unwrap();
    let psi = problem.psi(vec![0.8, 0.3]).unwrap();
    let oracle_cfg = OracleConfig::default();
    let oracle = oracle_bilevel_grad(&problem, &psi, &oracle_cfg).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (latents, train) = problem.simulator.generate(&psi, 4096, &mut rng).unwrap();
    let theta0 = init_model(&problem.model, 0).unwrap();
    let theta = train_to_convergence(&problem.model, &train, &theta0, 1e-10, 50).unwrap();
    let inputs = HypergradInputs {
        psi: &psi,
        theta_hat: &theta,
        latents: &latents,
        sim: problem.simulator.spec(),
        model: &problem.model,
        val_data: &problem.val_data,
    };
    let ours = hypergradient(&inputs, &HypergradConfig::default()).unwrap().grad_psi;
    let cos = cosine(&ours, &oracle);
    assert!(cos > 0.9, "cosine {cos}: {ours:?} vs {oracle:?}");
}
