mod common;

use autosim_core::autosim::AutoSimulate;
use autosim_core::baselines::{evaluate_objective, lts_reinforce, random_search, reinforce_direction};
use autosim_core::bench::metrics::first_at_target;
use autosim_core::bench::presets::preset;
use autosim_core::bench::Method;
use autosim_core::hypergrad::ApproxMode;
use autosim_core::simgen::Target;
use autosim_core::task::TaskName;
use common::median;
use nalgebra::{DMatrix, DVector};

fn gaussian_match(method: Method, seed: u64) -> autosim_core::bench::ExperimentConfig {
    preset(TaskName::GaussianMatch, method, ApproxMode::ExactQuadratic, seed)
}

#[test]
fn hidden_parameters_score_at_the_noise_floor() {
    let cfg = gaussian_match(Method::Random, 0);
    let problem = cfg.problem().unwrap();
    let bb = cfg.blackbox_config();
    let hidden = problem.simulator.spec().hidden_params().unwrap().unwrap();

    // best achievable: least squares fitted on the validation set itself
    let val = &problem.val_data;
    let x = DMatrix::from_fn(val.len(), 2, |r, c| if c == 0 { val[r].input[0] } else { 1.0 });
    let y = DVector::from_iterator(val.len(), val.iter().map(|p| match &p.target {
        Target::Real(v) => v[0],
        Target::Class(_) => unreachable!(),
    }));
    let w = x.clone().svd(true, true).solve(&y, 1e-12).unwrap();
    let floor = (&x * w - y).norm_squared() / val.len() as f64;

    let repeats: Vec<f64> = (0..10)
        .map(|seed| evaluate_objective(&problem, &hidden, &bb, 1000 + seed).unwrap().val_loss)
        .collect();
    let mean = repeats.iter().sum::<f64>() / 10.0;
    let sd = (repeats.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0).sqrt();
    let single = evaluate_objective(&problem, &hidden, &bb, 0).unwrap().val_loss;
    assert!(repeats.iter().all(|&v| v >= floor - 1e-12));
    assert!(single <= mean + 3.0 * sd, "{single} vs {mean} +- {sd}");
    assert!(mean - floor <= 3.0 * sd + 0.1 * floor, "floor {floor}, mean {mean}, sd {sd}");

    let start = evaluate_objective(&problem, &problem.initial_psi, &bb, 0).unwrap().val_loss;
    assert!(start > mean + 10.0 * sd);
}

#[test]
fn evaluations_are_reproducible_and_charged_once() {
    let cfg = gaussian_match(Method::Random, 0);
    let problem = cfg.problem().unwrap();
    let bb = cfg.blackbox_config();
    let a = evaluate_objective(&problem, &problem.initial_psi, &bb, 5).unwrap();
    let b = evaluate_objective(&problem, &problem.initial_psi, &bb, 5).unwrap();
    assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
    assert_eq!(a.samples_charged, bb.dataset_size as u64);
    assert_eq!(problem.ledger_total(), 2 * bb.dataset_size as u64);
}

#[test]
fn reinforce_direction_examples() {
    let scores = vec![vec![1.0, -2.0], vec![0.5, 3.0], vec![-4.0, 0.0]];
    assert_eq!(reinforce_direction(&[0.7, 0.7, 0.7], &scores).unwrap(), vec![0.0, 0.0]);
    let two = reinforce_direction(&[0.0, -1.0], &scores[..2]).unwrap();
    let want: Vec<f64> = scores[0].iter().zip(&scores[1]).map(|(a, b)| (a - b) / 2.0).collect();
    assert_eq!(two, want);
    assert!(reinforce_direction(&[1.0], &scores[..1]).is_err());
}

#[test]
fn lts_charges_candidates_times_batch() {
    let mut cfg = gaussian_match(Method::Lts, 2);
    cfg.budget.iterations = 3;
    cfg.budget.target_val_loss = None;
    let problem = cfg.problem().unwrap();
    let run = lts_reinforce(&problem, &cfg.lts_config()).unwrap();
    let per_iter = (cfg.lts.candidates * cfg.batch_size) as u64;
    for (i, r) in run.history.iter().enumerate() {
        assert_eq!(r.cumulative_samples, per_iter * (i as u64 + 1));
    }
    assert_eq!(problem.ledger_total(), run.cumulative_samples());

    let ours_problem = cfg.problem().unwrap();
    let ours = AutoSimulate::new(&ours_problem, cfg.autosim_config()).unwrap().run().unwrap();
    assert_eq!(run.cumulative_samples(), cfg.lts.candidates as u64 * ours.state.cumulative_samples);
}

#[test]
fn random_search_tracks_the_best_draw() {
    let mut cfg = gaussian_match(Method::Random, 4);
    cfg.budget.target_val_loss = None;
    cfg.budget.iterations = 1;
    let problem = cfg.problem().unwrap();
    let one = random_search(&problem, &cfg.random_config()).unwrap();
    assert_eq!(one.history.len(), 1);
    assert_eq!(one.history[0].best_val_loss, one.evaluations[0].val_loss);

    cfg.budget.iterations = 12;
    let a = random_search(&cfg.problem().unwrap(), &cfg.random_config()).unwrap();
    let b = random_search(&cfg.problem().unwrap(), &cfg.random_config()).unwrap();
    let best = |r: &autosim_core::baselines::BaselineRun| r.history.iter().map(|h| h.best_val_loss).collect::<Vec<_>>();
    assert_eq!(best(&a), best(&b));
    assert!(best(&a).windows(2).all(|w| w[1] <= w[0]));
    for psi in a.evaluations.iter().map(|e| &e.psi_candidate) {
        assert!(psi.iter().all(|&p| (cfg.random.low..=cfg.random.high).contains(&p)));
    }
}

#[test]
fn reinforce_needs_many_more_samples_than_autosim_on_gaussian_match() {
    let samples = |method: Method| -> f64 {
        median(
            (0..5)
                .map(|seed| {
                    let cfg = gaussian_match(method, seed);
                    let target = cfg.budget.target_val_loss.unwrap();
                    let problem = cfg.problem().unwrap();
                    let history = match method {
                        Method::Autosimulate => AutoSimulate::new(&problem, cfg.autosim_config()).unwrap().run().unwrap().state.history,
                        _ => lts_reinforce(&problem, &cfg.lts_config()).unwrap().history,
                    };
                    first_at_target(&history, target).map_or(f64::INFINITY, |r| r.cumulative_samples as f64)
                })
                .collect(),
        )
    };
    let ours = samples(Method::Autosimulate);
    let lts = samples(Method::Lts);
    assert!(ours.is_finite(), "autosim never reached the target");
    assert!(lts >= 2.0 * ours, "lts {lts} vs autosim {ours}");
}
