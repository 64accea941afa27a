mod common;

use common::{random_tensor, rng, rows};
use contlab::dynamics::{
    batch_env_stats, dynamics_loss, dynamics_loss_tape, predict_distribution,
    predict_distribution_tape, sample_env_feature, sample_env_features, DynamicsParams,
    DynamicsVars, EnvGaussian, FieldVars, InitialState, T0, VARIANCE_FLOOR,
};
use contlab::numerics::gradcheck::{numerical_gradient, relative_error, STEP};
use contlab::numerics::{Tape, Tensor};
use contlab::odeint::SolverConfig;
use contlab::Error;
use proptest::prelude::*;

fn gaussian(mean: &[f64], var: &[f64]) -> EnvGaussian {
    EnvGaussian {
        mean: Tensor::row(mean).unwrap(),
        var: Tensor::row(var).unwrap(),
        sample_count: 10,
    }
}

/// Column mean, then population variance in a second pass.
fn two_pass(rows: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (m, d) = (rows.rows(), rows.cols());
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..m).map(|i| rows.at(i, j)).sum::<f64>() / m as f64)
        .collect();
    let var = (0..d)
        .map(|j| {
            let v = (0..m)
                .map(|i| (rows.at(i, j) - mean[j]).powi(2))
                .sum::<f64>()
                / m as f64;
            v.max(VARIANCE_FLOOR)
        })
        .collect();
    (mean, var)
}

#[test]
fn batch_stats_examples() {
    let g = batch_env_stats(
        &rows(&[vec![0.0, 0.0], vec![2.0, 2.0]]),
        &Tensor::identity(2),
    )
    .unwrap();
    assert_eq!(g.mean.data(), &[1.0, 1.0]);
    assert_eq!(g.var.data(), &[1.0, 1.0]);
    let same = rows(&[vec![0.5, -1.0], vec![0.5, -1.0], vec![0.5, -1.0]]);
    let g = batch_env_stats(&same, &Tensor::identity(2)).unwrap();
    assert_eq!(g.var.data(), &[VARIANCE_FLOOR; 2]);
    assert!(matches!(
        batch_env_stats(&rows(&[vec![1.0, 2.0]]), &Tensor::identity(2)),
        Err(Error::InsufficientStatistics { needed: 2, got: 1 })
    ));
}

#[test]
fn batch_stats_match_two_pass_oracle() {
    let mut r = rng(1);
    for _ in 0..50 {
        let e = random_tensor(64, 5, -3.0, 3.0, &mut r);
        let w = random_tensor(5, 4, -1.0, 1.0, &mut r);
        let g = batch_env_stats(&e, &w).unwrap();
        let (mean, var) = two_pass(&e.matmul(&w).unwrap());
        for (a, b) in g
            .mean
            .data()
            .iter()
            .zip(&mean)
            .chain(g.var.data().iter().zip(&var))
        {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

fn identity_params(d_env: usize, d_h: usize) -> DynamicsParams {
    let mut p = DynamicsParams::init(d_env, d_env, d_h, &mut rng(2)).unwrap();
    for net in [&mut p.phi_mu, &mut p.phi_sigma] {
        net.w1 = Tensor::zeros(net.w1.shape());
    }
    p
}

#[test]
fn no_integration_returns_initial_state() {
    let p = identity_params(3, 5);
    let init = gaussian(&[0.5, -1.0, 2.0], &[0.3, 1.0, 4.0]);
    for tau in [T0, 3.0] {
        let g = predict_distribution(tau, &init, &p, &SolverConfig::default()).unwrap();
        for (a, b) in g
            .mean
            .data()
            .iter()
            .zip(init.mean.data())
            .chain(g.var.data().iter().zip(init.var.data()))
        {
            assert!((a - b).abs() < 1e-12, "tau {tau}: {a} vs {b}");
        }
    }
}

#[test]
fn constant_field_drifts_linearly() {
    let mut p = identity_params(2, 4);
    p.phi_mu.b2 = Tensor::row(&[0.5, -0.25, 9.0, 9.0]).unwrap();
    let init = gaussian(&[1.0, 1.0], &[1.0, 1.0]);
    let g = predict_distribution(4.0, &init, &p, &SolverConfig::default()).unwrap();
    let dt = 4.0 - T0;
    assert!((g.mean.data()[0] - (1.0 + 0.5 * dt)).abs() < 1e-9);
    assert!((g.mean.data()[1] - (1.0 - 0.25 * dt)).abs() < 1e-9);
}

#[test]
fn loss_examples() {
    let a = gaussian(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]);
    assert_eq!(dynamics_loss(&a, &a).unwrap(), 0.0);
    let b = gaussian(&[2.0, 3.0, 4.0], &[1.0, 1.0, 1.0]);
    assert_eq!(dynamics_loss(&a, &b).unwrap(), 3.0);
    let c = gaussian(&[0.0, 2.5, 3.0], &[2.0, 0.5, 1.0]);
    assert_eq!(
        dynamics_loss(&a, &c).unwrap(),
        dynamics_loss(&c, &a).unwrap()
    );
    assert!(dynamics_loss(&a, &gaussian(&[1.0], &[1.0])).is_err());
}

#[test]
fn sampling_examples() {
    let tight = gaussian(&[1.0, -2.0], &[VARIANCE_FLOOR, VARIANCE_FLOOR]);
    let e = sample_env_feature(&tight, &mut rng(3));
    assert!(e
        .data()
        .iter()
        .zip(tight.mean.data())
        .all(|(a, b)| (a - b).abs() < 1e-2));
    assert_eq!(
        sample_env_feature(&tight, &mut rng(4)),
        sample_env_feature(&tight, &mut rng(4))
    );

    let g = gaussian(&[0.5, -1.0, 3.0], &[0.25, 1.0, 4.0]);
    let draws = sample_env_features(&g, 10_000, &mut rng(5));
    for j in 0..3 {
        let mean = (0..10_000).map(|i| draws.at(i, j)).sum::<f64>() / 10_000.0;
        let bound = 4.0 * (g.var.data()[j] / 10_000.0).sqrt();
        assert!((mean - g.mean.data()[j]).abs() < bound, "dim {j}: {mean}");
    }
}

#[test]
fn initial_state_accumulates_then_freezes() {
    let mut s = InitialState::new(2);
    assert!(s.gaussian().is_none());
    s.accumulate(&rows(&[vec![0.0, 0.0], vec![2.0, 2.0]]))
        .unwrap();
    let g = s.gaussian().unwrap();
    assert_eq!(g.mean.data(), &[1.0, 1.0]);
    s.freeze();
    s.accumulate(&rows(&[vec![10.0, 10.0]])).unwrap();
    s.reset();
    assert_eq!(s.gaussian().unwrap(), g);
    assert!(InitialState::new(2)
        .accumulate(&rows(&[vec![1.0]]))
        .is_err());
}

fn random_params(seed: u64, d_env: usize, d_h: usize) -> DynamicsParams {
    let mut r = rng(seed);
    let mut p = DynamicsParams::init(d_env, d_env, d_h, &mut r).unwrap();
    for net in [&mut p.phi_mu, &mut p.phi_sigma] {
        net.w1 = random_tensor(d_h + 1, d_h, -0.5, 0.5, &mut r);
        net.b1 = random_tensor(1, d_h, -0.5, 0.5, &mut r);
        net.w2 = random_tensor(d_h, d_h, -0.5, 0.5, &mut r);
        net.b2 = random_tensor(1, d_h, -0.5, 0.5, &mut r);
    }
    p.w_e = random_tensor(d_env, d_h, -0.5, 0.5, &mut r);
    p.w_d = random_tensor(d_h, d_env, -0.5, 0.5, &mut r);
    p
}

fn flatten(p: &DynamicsParams) -> Vec<Tensor> {
    let mut v = Vec::new();
    for n in [&p.phi_mu, &p.phi_sigma] {
        v.extend([n.w1.clone(), n.b1.clone(), n.w2.clone(), n.b2.clone()]);
    }
    v.extend([p.w_e.clone(), p.w_d.clone()]);
    v
}

fn unflatten(template: &DynamicsParams, v: &[Tensor]) -> DynamicsParams {
    let mut p = template.clone();
    for (k, n) in [&mut p.phi_mu, &mut p.phi_sigma].into_iter().enumerate() {
        n.w1 = v[4 * k].clone();
        n.b1 = v[4 * k + 1].clone();
        n.w2 = v[4 * k + 2].clone();
        n.b2 = v[4 * k + 3].clone();
    }
    p.w_e = v[8].clone();
    p.w_d = v[9].clone();
    p
}

#[test]
fn dynamics_loss_gradient_matches_finite_differences() {
    let solver = SolverConfig::with_tolerances(1e-11, 1e-11);
    for (seed, d_env, d_h) in [(6, 2, 4), (7, 4, 8), (8, 3, 6)] {
        let p = random_params(seed, d_env, d_h);
        let mut r = rng(seed + 50);
        let init = EnvGaussian {
            mean: random_tensor(1, d_env, -1.0, 1.0, &mut r),
            var: random_tensor(1, d_env, 0.2, 2.0, &mut r),
            sample_count: 10,
        };
        let target = EnvGaussian {
            mean: random_tensor(1, d_env, -1.0, 1.0, &mut r),
            var: random_tensor(1, d_env, 0.2, 2.0, &mut r),
            sample_count: 10,
        };
        let tau = 2.5;
        let flat = flatten(&p);
        let mut tape = Tape::new();
        let vars: Vec<_> = flat.iter().map(|t| tape.param(t.clone())).collect();
        let field = |k: usize| FieldVars {
            w1: vars[4 * k],
            b1: vars[4 * k + 1],
            w2: vars[4 * k + 2],
            b2: vars[4 * k + 3],
        };
        let dv = DynamicsVars {
            phi_mu: field(0),
            phi_sigma: field(1),
            w_e: vars[8],
            w_d: vars[9],
        };
        let (mean, var) = predict_distribution_tape(&mut tape, &dv, tau, &init, &solver).unwrap();
        let loss = dynamics_loss_tape(&mut tape, mean, var, &target).unwrap();
        tape.backward(loss).unwrap();
        let numeric = numerical_gradient(&flat, STEP, |v| {
            let pred = predict_distribution(tau, &init, &unflatten(&p, v), &solver)?;
            dynamics_loss(&pred, &target)
        })
        .unwrap();
        for (k, n) in numeric.iter().enumerate() {
            for (a, b) in tape.grad(vars[k]).data().iter().zip(n.data()) {
                assert!(
                    relative_error(*a, *b) < 1e-3,
                    "seed {seed} tensor {k}: {a} vs {b}"
                );
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn predicted_variance_is_positive(seed in 0u64..1000, tau in 1.0f64..6.0) {
        let p = random_params(seed, 3, 5);
        let init = gaussian(&[0.1, 0.2, -0.3], &[1e-3, 0.5, 2.0]);
        let g = predict_distribution(tau, &init, &p, &SolverConfig::default()).unwrap();
        prop_assert!(g.var.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn zero_fields_are_constant_in_time(seed in 0u64..1000, tau in 1.0f64..8.0) {
        let mut p = random_params(seed, 3, 5);
        for net in [&mut p.phi_mu, &mut p.phi_sigma] {
            net.w2 = Tensor::zeros(net.w2.shape());
            net.b2 = Tensor::zeros(net.b2.shape());
        }
        let init = gaussian(&[0.1, 0.2, -0.3], &[0.4, 0.5, 2.0]);
        let at_t0 = predict_distribution(T0, &init, &p, &SolverConfig::default()).unwrap();
        let later = predict_distribution(tau, &init, &p, &SolverConfig::default()).unwrap();
        prop_assert_eq!(at_t0, later);
    }

    #[test]
    fn loss_zero_iff_equal(m in prop::collection::vec(-3.0f64..3.0, 3), dm in -1.0f64..1.0) {
        let a = gaussian(&m, &[1.0, 1.0, 1.0]);
        let mut shifted = m.clone();
        shifted[0] += dm;
        let b = gaussian(&shifted, &[1.0, 1.0, 1.0]);
        let l = dynamics_loss(&a, &b).unwrap();
        prop_assert_eq!(l == 0.0, dm == 0.0 || shifted[0] == m[0]);
    }
}
