mod common;

use common::{packed, rel_err, tiny_config, tiny_model};
use lampat::lora::AdapterTarget;
use lampat::rng::component_rng;
use lampat::tinylm::{
    embed, kl_div, kl_div_grad, loss_rec, loss_rec_grad, positional_encoding, softmax, GradRequest,
    Parameters,
};
use lampat::Error;
use ndarray::{array, Array2};
use rand_distr::{Distribution, Normal};

const FD_STEP: f64 = 1e-5;

fn random_matrix(n: usize, d: usize, std: f64, seed: u64) -> Array2<f64> {
    let mut rng = component_rng(seed, "matrix");
    let normal = Normal::new(0.0, std).unwrap();
    Array2::from_shape_fn((n, d), |_| normal.sample(&mut rng))
}

#[test]
fn embedding_of_zero_table_is_the_position_code() {
    let params = Parameters::<f64>::zeros(tiny_config()).unwrap();
    let x = embed(&[5], &params).unwrap();
    assert_eq!(x, positional_encoding::<f64>(1, 8));
}

#[test]
fn repeated_tokens_differ_only_by_position() {
    let (params, _) = tiny_model(1);
    let x = embed(&[7, 7], &params).unwrap();
    let pe = positional_encoding::<f64>(2, 8);
    let diff = &x.row(1) - &x.row(0);
    let pdiff = &pe.row(1) - &pe.row(0);
    for (a, b) in diff.iter().zip(pdiff.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn embedding_is_a_table_lookup() {
    let mut params = Parameters::<f64>::zeros(tiny_config()).unwrap();
    params.embedding_mut()[[3, 3]] = 1.0;
    let x = embed(&[3], &params).unwrap();
    let mut expected = positional_encoding::<f64>(1, 8);
    expected[[0, 3]] += 1.0;
    assert_eq!(x, expected);
    assert!(matches!(
        embed(&[16], &params),
        Err(Error::VocabOverflow { id: 16, vocab_size: 16 })
    ));
}

#[test]
fn zero_perturbation_matches_unperturbed_forward() {
    let (params, adapters) = tiny_model(2);
    let x = embed(&[4, 5, 6, 1, 7], &params).unwrap();
    let (a, _) = params.forward(&x, None, Some(&adapters)).unwrap();
    let zero = Array2::zeros(x.raw_dim());
    let (b, _) = params.forward(&x, Some(&zero), Some(&adapters)).unwrap();
    assert_eq!(a, b);
    let (c, _) = params.forward(&x, None, Some(&adapters)).unwrap();
    assert_eq!(a, c);
}

#[test]
fn forward_rejects_bad_shapes() {
    let (params, _) = tiny_model(2);
    let x = embed(&[4, 5, 6], &params).unwrap();
    let wrong = Array2::zeros((2, 8));
    assert!(matches!(
        params.forward(&x, Some(&wrong), None),
        Err(Error::ShapeError { .. })
    ));
    assert!(matches!(
        params.forward(&Array2::zeros((3, 5)), None, None),
        Err(Error::ShapeError { .. })
    ));
}

#[test]
fn logits_are_causal() {
    let (params, adapters) = tiny_model(3);
    let tokens = vec![4, 9, 1, 12, 5, 2];
    let (base, _) = params.forward_tokens(&tokens, None, Some(&adapters)).unwrap();
    for j in 0..tokens.len() {
        let mut mutated = tokens.clone();
        mutated[j] = if tokens[j] == 10 { 11 } else { 10 };
        let (out, _) = params.forward_tokens(&mutated, None, Some(&adapters)).unwrap();
        for i in 0..j {
            assert_eq!(out.row(i), base.row(i), "row {i} changed after mutating {j}");
        }
        assert_ne!(out.row(j), base.row(j));
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let (params, adapters) = tiny_model(4);
    let (logits, _) = params.forward_tokens(&[4, 5, 6, 7], None, Some(&adapters)).unwrap();
    for row in softmax(&logits).rows() {
        assert!((row.sum() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn cross_entropy_of_uniform_logits_is_log_vocab() {
    let p = packed(&[4, 5], &[6, 7], 16);
    let logits = Array2::<f64>::zeros((p.len(), 16));
    assert!((loss_rec(&logits, &p).unwrap() - 16f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_vanishes_for_confident_correct_logits() {
    let p = packed(&[4], &[6], 16);
    let mut logits = Array2::<f64>::zeros((p.len(), 16));
    for j in 1..p.len() {
        logits[[j - 1, p.tokens[j]]] = 50.0;
    }
    assert!(loss_rec(&logits, &p).unwrap() < 1e-12);
}

#[test]
fn cross_entropy_hand_computed() {
    // source [] -> tokens [SEP, a, EOS]; rows 0 and 1 predict a and EOS.
    let p = packed(&[], &[3], 8);
    assert_eq!(p.tokens, vec![1, 3, 2]);
    let mut logits = Array2::<f64>::zeros((3, 4));
    logits.row_mut(0).assign(&array![0.0, 1.0, 2.0, 3.0]);
    logits.row_mut(1).assign(&array![1.0, 0.0, 0.5, 0.0]);
    let lse0 = (1f64 + 1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
    let lse1 = (1f64.exp() + 1.0 + 0.5f64.exp() + 1.0).ln();
    let expected = ((lse0 - 3.0) + (lse1 - 0.5)) / 2.0;
    assert!((loss_rec(&logits, &p).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn empty_mask_is_an_error() {
    let p = packed(&[4], &[5], 8);
    let logits = Array2::<f64>::zeros((p.len(), 16));
    let mask = vec![false; p.len()];
    assert!(matches!(kl_div(&logits, &logits, &mask), Err(Error::EmptyLossMask)));
    let mut q = p.clone();
    q.mask = mask;
    assert!(matches!(loss_rec(&logits, &q), Err(Error::EmptyLossMask)));
}

#[test]
fn kl_identities() {
    let a = random_matrix(4, 6, 1.0, 1);
    let b = random_matrix(4, 6, 1.0, 2);
    let mask = [false, true, true, true];
    assert_eq!(kl_div(&a, &a, &mask).unwrap(), 0.0);
    assert!(kl_div(&a, &b, &mask).unwrap() >= 0.0);
    assert!(matches!(
        kl_div(&a, &random_matrix(3, 6, 1.0, 3), &mask),
        Err(Error::ShapeError { .. })
    ));
}

#[test]
fn kl_two_outcome_closed_form() {
    let p = array![[0.0, 0.0], [0.0, 0.0]];
    let q = array![[3f64.ln(), 0.0], [0.0, 0.0]];
    // P = (1/2, 1/2), Q = (3/4, 1/4): KL = ½ln(2/3) + ½ln 2 = ½ln(4/3)
    let kl = kl_div(&p, &q, &[false, true]).unwrap();
    assert!((kl - 0.5 * (4f64 / 3.0).ln()).abs() < 1e-12);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let p = packed(&[4, 5], &[6, 7, 8], 16);
    let logits = random_matrix(p.len(), 16, 1.0, 5);
    let q = random_matrix(p.len(), 16, 1.0, 6);
    let (_, g_rec) = loss_rec_grad(&logits, &p).unwrap();
    let (_, g_kl) = kl_div_grad(&logits, &q, &p.mask).unwrap();
    for i in 0..p.len() {
        for j in 0..16 {
            let mut plus = logits.clone();
            let mut minus = logits.clone();
            plus[[i, j]] += FD_STEP;
            minus[[i, j]] -= FD_STEP;
            let fd = (loss_rec(&plus, &p).unwrap() - loss_rec(&minus, &p).unwrap()) / (2.0 * FD_STEP);
            assert!((fd - g_rec[[i, j]]).abs() < 1e-8);
            let fd = (kl_div(&plus, &q, &p.mask).unwrap() - kl_div(&minus, &q, &p.mask).unwrap())
                / (2.0 * FD_STEP);
            assert!((fd - g_kl[[i, j]]).abs() < 1e-8);
        }
    }
}

#[test]
fn stale_trace_is_rejected() {
    let (mut params, adapters) = tiny_model(7);
    let (logits, trace) = params.forward_tokens(&[4, 5, 6], None, Some(&adapters)).unwrap();
    let d = Array2::zeros(logits.raw_dim());
    assert!(params.backward(&trace, Some(&adapters), &d, GradRequest::ALL).is_ok());
    assert!(matches!(
        params.backward(&trace, None, &d, GradRequest::ALL),
        Err(Error::TraceMismatch)
    ));
    params.embedding_mut()[[0, 0]] += 1.0;
    assert!(matches!(
        params.backward(&trace, Some(&adapters), &d, GradRequest::ALL),
        Err(Error::TraceMismatch)
    ));
}

#[test]
fn zero_b_factor_gives_exactly_zero_a_gradient() {
    let (params, mut adapters) = tiny_model(8);
    adapters.get_mut(0, AdapterTarget::Query).b.fill(0.0);
    let p = packed(&[4, 5], &[6, 7], 16);
    let (logits, trace) = params.forward_tokens(&p.tokens, None, Some(&adapters)).unwrap();
    let (_, d) = loss_rec_grad(&logits, &p).unwrap();
    let g = params.backward(&trace, Some(&adapters), &d, GradRequest::ADAPTERS).unwrap();
    let ga = g.adapters.unwrap();
    assert!(ga.get(0, AdapterTarget::Query).a.iter().all(|&v| v == 0.0));
    assert!(ga.get(0, AdapterTarget::Value).a.iter().any(|&v| v != 0.0));
}

#[test]
fn perturbation_gradient_at_zero_is_the_input_gradient() {
    let (params, adapters) = tiny_model(9);
    let p = packed(&[4, 5], &[6, 7], 16);
    let x = embed(&p.tokens, &params).unwrap();
    let zero = Array2::zeros(x.raw_dim());
    let (l1, t1) = params.forward(&x, Some(&zero), Some(&adapters)).unwrap();
    let (_, t2) = params.forward(&x, None, Some(&adapters)).unwrap();
    let (_, d) = loss_rec_grad(&l1, &p).unwrap();
    let g1 = params.backward(&t1, Some(&adapters), &d, GradRequest::INPUT).unwrap();
    let g2 = params.backward(&t2, Some(&adapters), &d, GradRequest::INPUT).unwrap();
    assert_eq!(g1.input.unwrap(), g2.input.unwrap());
}

/// Central-difference check of every parameter and adapter entry and of the
/// embedding input, for the reconstruction loss.
#[test]
fn parameter_gradients_match_finite_differences() {
    let (mut params, adapters) = tiny_model(10);
    let p = packed(&[4, 9, 5], &[6, 7, 12], 16);
    let loss = |params: &Parameters<f64>| {
        let (logits, _) = params.forward_tokens(&p.tokens, None, Some(&adapters)).unwrap();
        loss_rec(&logits, &p).unwrap()
    };
    let (logits, trace) = params.forward_tokens(&p.tokens, None, Some(&adapters)).unwrap();
    let (_, d) = loss_rec_grad(&logits, &p).unwrap();
    let grads = params.backward(&trace, Some(&adapters), &d, GradRequest::ALL).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads
        .params
        .unwrap()
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.data.to_vec()))
        .collect();
    let mut worst = 0.0f64;
    for (ti, (name, g)) in analytic.iter().enumerate() {
        for idx in 0..g.len() {
            let orig = params.tensors()[ti].data[idx];
            params.tensors_mut()[ti].data[idx] = orig + FD_STEP;
            let up = loss(&params);
            params.tensors_mut()[ti].data[idx] = orig - FD_STEP;
            let down = loss(&params);
            params.tensors_mut()[ti].data[idx] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(g[idx], fd);
            assert!(e < 1e-4, "{name}[{idx}]: analytic {} vs fd {fd}", g[idx]);
            worst = worst.max(e);
        }
    }
    assert!(worst < 1e-4);
}
