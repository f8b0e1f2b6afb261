mod common;

use common::{packed, rel_err, tiny_model};
use lampat::advtrain::{
    ascent_step_pgd, ascent_step_pnm, estimate_hessian_diag, minibatch_step, project_ball,
    project_h_ball, train, train_from, HessianDiag, NoCheckpoints, Phase, VatConfig,
};
use lampat::corpus::PackedSequence;
use lampat::lora::AdapterSet;
use lampat::rng::component_rng;
use lampat::scalar::frobenius;
use lampat::tinylm::{loss_rec_grad, GradRequest, Parameters};
use lampat::Error;
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn batch() -> Vec<PackedSequence> {
    vec![
        packed(&[4, 5, 6], &[4, 5, 6], 16),
        packed(&[7, 8, 9, 10], &[7, 8, 9, 10], 16),
        packed(&[11, 12], &[12, 11, 13], 16),
    ]
}

fn max_rel_delta_diff(before: &AdapterSet<f64>, a: &AdapterSet<f64>, b: &AdapterSet<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for ((t0, ta), tb) in before.tensors().iter().zip(a.tensors()).zip(b.tensors()) {
        for ((&x0, &xa), &xb) in t0.data.iter().zip(ta.data).zip(tb.data) {
            worst = worst.max(((xa - x0) - (xb - x0)).abs());
            scale = scale.max((xb - x0).abs());
        }
    }
    worst / scale
}

fn reference_sgd(params: &Parameters<f64>, adapters: &AdapterSet<f64>, batch: &[PackedSequence], tau: f64) -> AdapterSet<f64> {
    let mut g = adapters.zeros_like();
    for seq in batch {
        let (logits, trace) = params.forward_tokens(&seq.tokens, None, Some(adapters)).unwrap();
        let (_, d) = loss_rec_grad(&logits, seq).unwrap();
        let grads = params.backward(&trace, Some(adapters), &d, GradRequest::ADAPTERS).unwrap();
        g.add_scaled(grads.adapters.as_ref().unwrap(), 1.0);
    }
    let mut out = adapters.clone();
    out.add_scaled(&g, -tau / batch.len() as f64);
    out
}

#[test]
fn degenerate_step_is_plain_sgd() {
    let (params, adapters) = tiny_model(3);
    let cfg = VatConfig {
        alpha: 0.0,
        ascent_steps: 1,
        init_scale: 0.0,
        epsilon: 0.7,
        tau: 0.05,
        ..VatConfig::default()
    };
    let mut ours = adapters.clone();
    minibatch_step(&params, &mut ours, &batch(), &cfg, 1, 1, &mut component_rng(0, "vat")).unwrap();
    let reference = reference_sgd(&params, &adapters, &batch(), cfg.tau);
    let diff = max_rel_delta_diff(&adapters, &ours, &reference);
    assert!(diff < 1e-6, "relative delta difference {diff}");
}

#[test]
fn frozen_perturbation_makes_k_irrelevant() {
    let (params, adapters) = tiny_model(4);
    let base = VatConfig {
        init_scale: 0.0,
        tau: 0.05,
        ..VatConfig::default()
    };
    let run = |k: usize| {
        let mut a = adapters.clone();
        let cfg = VatConfig { ascent_steps: k, ..base };
        let r = minibatch_step(&params, &mut a, &batch(), &cfg, 1, 1, &mut component_rng(0, "vat")).unwrap();
        (a, r)
    };
    let (one, _) = run(1);
    let (three, report) = run(3);
    assert!(report.perturbations.iter().all(|d| d.iter().all(|&v| v == 0.0)));
    assert!(report.vadv_trajectory.iter().flatten().all(|&v| v == 0.0));
    for (x, y) in one.tensors().iter().zip(three.tensors()) {
        for (&a, &b) in x.data.iter().zip(y.data) {
            assert!(rel_err(a, b) < 1e-12);
        }
    }
}

fn check_monotone(epoch: usize) {
    let (params, adapters) = tiny_model(5);
    let cfg = VatConfig {
        epochs: 2,
        pgd_epochs: Some(1),
        init_scale: 0.05,
        eta: 0.2,
        ascent_steps: 4,
        ..VatConfig::default()
    };
    let mut a = adapters.clone();
    let report = minibatch_step(&params, &mut a, &batch(), &cfg, epoch, 1, &mut component_rng(9, "vat")).unwrap();
    for traj in &report.vadv_trajectory {
        assert_eq!(traj.len(), cfg.ascent_steps + 1);
        for w in traj.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "{traj:?}");
        }
        assert!(traj.last().unwrap() >= &(traj[0] - 1e-8));
    }
}

#[test]
fn ascent_never_lowers_the_divergence_pgd() {
    check_monotone(1);
}

#[test]
fn ascent_never_lowers_the_divergence_pnm() {
    check_monotone(2);
}

#[test]
fn alpha_does_not_change_the_perturbation_path() {
    let (params, adapters) = tiny_model(6);
    for epoch in [1, 2] {
        let run = |alpha: f64| {
            let cfg = VatConfig {
                alpha,
                epochs: 2,
                pgd_epochs: Some(1),
                ..VatConfig::default()
            };
            let mut a = adapters.clone();
            minibatch_step(&params, &mut a, &batch(), &cfg, epoch, 1, &mut component_rng(2, "vat")).unwrap()
        };
        let r0 = run(0.0);
        let r5 = run(5.0);
        assert_eq!(r0.perturbations, r5.perturbations);
        assert_eq!(r0.vadv_trajectory, r5.vadv_trajectory);
        assert_eq!(r0.phase, if epoch == 1 { Phase::Pgd } else { Phase::Pnm });
    }
}

#[test]
fn perturbations_respect_the_bound() {
    let (params, adapters) = tiny_model(7);
    for epoch in [1, 2] {
        let cfg = VatConfig {
            epsilon: 0.3,
            eta: 0.5,
            epochs: 2,
            pgd_epochs: Some(1),
            ..VatConfig::default()
        };
        let mut a = adapters.clone();
        let r = minibatch_step(&params, &mut a, &batch(), &cfg, epoch, 1, &mut component_rng(1, "vat")).unwrap();
        for d in &r.perturbations {
            assert!(frobenius(d) <= 0.3 * (1.0 + 1e-9));
        }
    }
}

#[test]
fn training_is_deterministic_and_leaves_the_base_alone() {
    let (params, adapters) = tiny_model(8);
    let snapshot = params.clone();
    let data: Vec<PackedSequence> = (0..6)
        .map(|i| packed(&[4 + i, 5 + i, 6], &[4 + i, 5 + i, 6], 16))
        .collect();
    let cfg = VatConfig {
        epochs: 4,
        batch_size: 4,
        tau: 0.01,
        seed: 11,
        ..VatConfig::default()
    };
    let a = train(&data, &params, adapters.clone(), &cfg, &mut NoCheckpoints).unwrap();
    let b = train(&data, &params, adapters.clone(), &cfg, &mut NoCheckpoints).unwrap();
    assert_eq!(a.history, b.history);
    for (x, y) in a.adapters.tensors().iter().zip(b.adapters.tensors()) {
        assert_eq!(x.data, y.data);
    }
    assert_ne!(a.adapters.tensors()[1].data, adapters.tensors()[1].data);
    assert_eq!(a.history.len(), 8);
    assert_eq!(a.history[0].phase, Phase::Pgd);
    assert_eq!(a.history[7].phase, Phase::Pnm);
    assert!(a.history.iter().all(|h| h.loss_rec.is_finite() && h.loss_vadv.is_finite()));
    for (x, y) in params.tensors().iter().zip(snapshot.tensors()) {
        assert!(x.data.iter().zip(y.data).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let (params, adapters) = tiny_model(12);
    let data: Vec<PackedSequence> = (0..5)
        .map(|i| packed(&[4 + i, 6, 5 + i], &[4 + i, 5 + i, 6], 16))
        .collect();
    let cfg = VatConfig {
        epochs: 4,
        pgd_epochs: Some(2),
        batch_size: 2,
        tau: 0.01,
        seed: 3,
        ..VatConfig::default()
    };
    let whole = train(&data, &params, adapters.clone(), &cfg, &mut NoCheckpoints).unwrap();
    let half = VatConfig { epochs: 2, ..cfg.clone() };
    let first = train(&data, &params, adapters, &half, &mut NoCheckpoints).unwrap();
    let rest = train_from(&data, &params, first.adapters, &cfg, 2, &mut NoCheckpoints).unwrap();
    assert_eq!(rest.adapters, whole.adapters);
    let joined: Vec<_> = first.history.into_iter().chain(rest.history).collect();
    assert_eq!(joined, whole.history);
}

#[test]
fn zero_epochs_return_the_initial_adapters() {
    let (params, adapters) = tiny_model(9);
    let cfg = VatConfig { epochs: 0, ..VatConfig::default() };
    let out = train(&[packed(&[4], &[4], 16)], &params, adapters.clone(), &cfg, &mut NoCheckpoints).unwrap();
    assert_eq!(out.adapters, adapters);
    assert!(out.history.is_empty());
}

#[test]
fn non_finite_loss_is_reported_as_divergence() {
    let (params, mut adapters) = tiny_model(10);
    adapters.tensors_mut()[0].data[0] = f64::NAN;
    let cfg = VatConfig::default();
    let err = minibatch_step(&params, &mut adapters, &batch(), &cfg, 3, 17, &mut component_rng(0, "vat")).unwrap_err();
    assert!(matches!(err, Error::DivergenceDetected { epoch: 3, step: 17 }), "{err:?}");
}

#[test]
fn empty_inputs_are_rejected() {
    let (params, mut adapters) = tiny_model(11);
    let cfg = VatConfig::default();
    assert!(minibatch_step(&params, &mut adapters, &[], &cfg, 1, 1, &mut component_rng(0, "v")).is_err());
    assert!(matches!(
        train(&[], &params, adapters, &cfg, &mut NoCheckpoints),
        Err(Error::EmptyCorpus)
    ));
}

/// Maximiser of `−(δ−c)ᵀD(δ−c)` over the Euclidean ε-ball: `δ = (D + μ)⁻¹Dc`
/// with μ found by bisection so that `‖δ‖ = ε`.
fn euclidean_optimum(d: &Array1<f64>, c: &Array1<f64>, eps: f64) -> Array1<f64> {
    let at = |mu: f64| Array1::from_shape_fn(c.len(), |i| d[i] * c[i] / (d[i] + mu));
    let (mut lo, mut hi) = (0.0, 1.0);
    while at(hi).dot(&at(hi)).sqrt() > eps {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if at(mid).dot(&at(mid)).sqrt() > eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(hi)
}

fn iterations_to_reach(
    mut step: impl FnMut(&Array2<f64>) -> Array2<f64>,
    target: &Array2<f64>,
    max_iter: usize,
) -> Option<usize> {
    let mut delta = Array2::<f64>::zeros(target.raw_dim());
    for i in 1..=max_iter {
        delta = step(&delta);
        if frobenius(&(&delta - target)) < 1e-3 {
            return Some(i);
        }
    }
    None
}

#[test]
fn pgd_reaches_the_isotropic_boundary_optimum() {
    let c = Array2::from_shape_vec((2, 3), vec![1.0, -2.0, 0.5, 2.0, 0.3, -1.0]).unwrap();
    let eps = 1.0;
    let target = &c * (eps / frobenius(&c));
    let grad = |d: &Array2<f64>| (&c - d) * 2.0;
    let n = iterations_to_reach(|d| ascent_step_pgd(d, &grad(d), 0.1, eps), &target, 200);
    assert!(n.is_some_and(|n| n <= 200), "{n:?}");
}

#[test]
fn pnm_beats_pgd_on_a_diagonal_quadratic() {
    let dvec = Array1::from(vec![0.05, 0.4, 0.1, 0.25, 0.15, 0.3]);
    let cvec = Array1::from(vec![2.0, -1.0, 1.5, 0.8, -2.5, 1.0]);
    let eps = 1.0;
    let eta = 0.1;
    let dm = dvec.clone().into_shape_with_order((2, 3)).unwrap();
    let cm = cvec.clone().into_shape_with_order((2, 3)).unwrap();
    let grad = |d: &Array2<f64>| (&cm - d) * &dm * 2.0;

    let pgd_target = euclidean_optimum(&dvec, &cvec, eps).into_shape_with_order((2, 3)).unwrap();
    let pgd = iterations_to_reach(|d| ascent_step_pgd(d, &grad(d), eta, eps), &pgd_target, 200);

    // Curvature of the quadratic; the estimator recovers it exactly here.
    let h = estimate_hessian_diag(|d| Ok(grad(d)), &cm, &grad(&cm), 1, 1e-3, 1e-3, &mut component_rng(0, "h")).unwrap();
    for (e, d) in h.values.iter().zip(dm.iter()) {
        assert!((e - 2.0 * d).abs() < 1e-9);
    }
    // In H-coordinates the problem is isotropic: the optimum is radial.
    let c_h = h.norm(&cm);
    let pnm_target = &cm * (h.radius(eps) / c_h);
    let pnm = iterations_to_reach(|d| ascent_step_pnm(d, &grad(d), &h, eta, eps), &pnm_target, 200);

    let pgd = pgd.expect("PGD within 200 iterations");
    let pnm = pnm.expect("PNM within 200 iterations");
    assert!(pnm < pgd, "PNM {pnm} vs PGD {pgd}");
}

#[test]
fn pnm_with_unit_curvature_equals_pgd_bitwise() {
    let mut rng = component_rng(42, "cases");
    for case in 0..100u64 {
        let scale = 0.1 + case as f64 / 50.0;
        let delta: Array2<f64> = lampat::advtrain::init_perturbation(3, 5, scale, 1.0, 10.0, &mut rng);
        let g: Array2<f64> = lampat::advtrain::init_perturbation(3, 5, 1.0, 1.0, 100.0, &mut rng);
        let eps = 0.2 + (case % 7) as f64 * 0.3;
        let h = HessianDiag::constant(3, 5, 1.0, 1e-3);
        let a = ascent_step_pnm(&delta, &g, &h, 0.25, eps);
        let b = ascent_step_pgd(&delta, &g, 0.25, eps);
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()), "case {case}");
    }
}

fn matrix() -> impl Strategy<Value = Array2<f64>> {
    (1usize..5, 1usize..6).prop_flat_map(|(n, d)| {
        prop::collection::vec(-100.0f64..100.0, n * d)
            .prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn projection_never_leaves_the_ball(delta in matrix(), eps in 1e-6f64..50.0) {
        let p = project_ball(delta, eps);
        prop_assert!(frobenius(&p) <= eps * (1.0 + 1e-9));
    }

    #[test]
    fn h_projection_stays_inside_both_balls(delta in matrix(), eps in 1e-3f64..10.0, lo in 1e-3f64..1.0, spread in 1.0f64..100.0) {
        let (n, d) = delta.dim();
        let values = Array2::from_shape_fn((n, d), |(i, j)| lo * (1.0 + (spread - 1.0) * ((i * d + j) % 3) as f64 / 2.0));
        let h = HessianDiag { values, damping: 1e-3 };
        let p = project_h_ball(delta, &h, eps);
        prop_assert!(h.norm(&p) <= h.radius(eps) * (1.0 + 1e-9));
        prop_assert!(frobenius(&p) <= eps * (1.0 + 1e-9));
    }
}
