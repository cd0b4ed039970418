use lwkd_core::gradcheck::{grad_check, run_suite, suite};
use lwkd_core::probe::{weighted_sum, SummaryWeights};
use lwkd_core::{FeatureMap, Graph, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn sized_matrix() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..6, 2usize..8).prop_flat_map(|(r, c)| matrix(r, c))
}

#[test]
fn every_primitive_passes_finite_differences() {
    let results = run_suite(2024, 3, 1e-5).unwrap();
    assert_eq!(results.len(), 3 * suite().len());
    for r in &results {
        assert!(r.report.passes(1e-5), "{} {:?}: {:e}", r.name, r.shapes, r.report.max_rel_err);
    }
}

#[test]
fn matmul_gradient_of_quadratic_form() {
    // f(x) = sum((x W)^2) with fixed W, so df/dx = 2 (x W) W^T.
    let w = Tensor::from_f64_slice(&[2, 2], &[1.0, 2.0, -1.0, 0.5]).unwrap();
    let x = Tensor::from_f64_slice(&[1, 2], &[0.3, -0.7]).unwrap();
    let mut g: Graph<f64> = Graph::new();
    let xv = g.param(x.clone());
    let wv = g.constant(w.clone());
    let y = g.matmul(xv, wv).unwrap();
    let sq = g.mul(y, y).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    let xw = [0.3 * 1.0 + -0.7 * -1.0, 0.3 * 2.0 + -0.7 * 0.5];
    let want = [2.0 * (xw[0] * 1.0 + xw[1] * 2.0), 2.0 * (-xw[0] + xw[1] * 0.5)];
    let got = g.grad(xv).unwrap().data();
    for (a, b) in got.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    let report = grad_check(
        |g, x| {
            let wv = g.constant(w.clone());
            let y = g.matmul(x, wv)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(report.passes(1e-7));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g: Graph<f64> = Graph::new();
    let a = g.constant(Tensor::from_f64_slice(&[1, 2], &[1.0, 2.0]).unwrap());
    let b = g.param(Tensor::from_f64_slice(&[1, 2], &[3.0, 4.0]).unwrap());
    let p = g.mul(a, b).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert!(g.grad(a).is_none());
    assert_eq!(g.grad(b).unwrap().data(), &[1.0, 2.0]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in sized_matrix()) {
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax(v);
        let out = g.value(s);
        for row in out.data().chunks(out.cols()) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn log_softmax_is_log_of_softmax(x in sized_matrix()) {
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax(v);
        let l = g.log_softmax(v);
        for (p, lp) in g.value(s).data().iter().zip(g.value(l).data()) {
            prop_assert!((p.ln() - lp).abs() < 1e-10);
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance(x in sized_matrix()) {
        let d = x.cols();
        let spread = x.data().chunks(d).all(|r| {
            let m = r.iter().sum::<f64>() / d as f64;
            r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64 > 1e-2
        });
        prop_assume!(spread);
        let mut g = Graph::new();
        let v = g.constant(x);
        let gamma = g.constant(Tensor::ones(&[d]));
        let beta = g.constant(Tensor::zeros(&[d]));
        let y = g.layer_norm(v, gamma, beta).unwrap();
        for row in g.value(y).data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn weighted_sum_ignores_logit_shift(
        maps in prop::collection::vec(matrix(3, 4), 1..5),
        shift in -50.0f64..50.0,
        seed in any::<u64>(),
    ) {
        let k = maps.len();
        let logits: Vec<f64> = (0..k).map(|i| ((seed >> (i * 8)) & 0xff) as f64 / 32.0 - 4.0).collect();
        let features: Vec<FeatureMap<f64>> = maps.into_iter().enumerate().map(|(i, frames)| FeatureMap { frames, layer_index: i }).collect();
        let a = weighted_sum(&features, &SummaryWeights { logits: logits.clone() }).unwrap();
        let shifted = logits.iter().map(|l| l + shift).collect();
        let b = weighted_sum(&features, &SummaryWeights { logits: shifted }).unwrap();
        for (x, y) in a.frames.data().iter().zip(b.frames.data()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn weighted_sum_follows_permutation(maps in prop::collection::vec(matrix(2, 3), 2..5)) {
        let k = maps.len();
        let logits: Vec<f64> = (0..k).map(|i| i as f64 * 0.3).collect();
        let features: Vec<FeatureMap<f64>> = maps.iter().cloned().enumerate().map(|(i, frames)| FeatureMap { frames, layer_index: i }).collect();
        let a = weighted_sum(&features, &SummaryWeights { logits: logits.clone() }).unwrap();
        let rev_f: Vec<_> = features.iter().rev().cloned().collect();
        let rev_l: Vec<f64> = logits.iter().rev().copied().collect();
        let b = weighted_sum(&rev_f, &SummaryWeights { logits: rev_l }).unwrap();
        for (x, y) in a.frames.data().iter().zip(b.frames.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn summary_weights_sum_to_one(logits in prop::collection::vec(-30.0f64..30.0, 1..10)) {
        let w = SummaryWeights { logits }.softmax();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}
