mod common;
use common::tensor;

use mvcc_core::losses::{self, CorrelationBatch};
use mvcc_core::tensor::gradcheck::{self, DEFAULT_FLOOR, DEFAULT_STEP};
use mvcc_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn correlation_matrix_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut g = Graph::new();
    let id = g.constant(tensor(&f));
    let a = losses::correlation_matrix(&mut g, id).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert!((g.value(a).at2(i, j) - common::dot(&f[i], &f[j])).abs() < 1e-12);
            assert!((g.value(a).at2(i, j) - g.value(a).at2(j, i)).abs() < 1e-12);
        }
    }
}

#[test]
fn correlation_consistency_hand_case() {
    let f = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4]];
    let fp = vec![vec![0.7, 0.3], vec![0.1, 0.9], vec![0.5, 0.5]];
    let t = vec![vec![0.8, 0.2], vec![0.15, 0.85], vec![0.55, 0.45]];
    let oracle = common::correlation_consistency(&f, &fp, &t, &t);
    assert!((common::cc_value(&f, &fp, &t) - oracle).abs() < 1e-10);
    // swapping the views leaves the loss unchanged
    assert!((common::cc_value(&fp, &f, &t) - oracle).abs() < 1e-12);
}

#[test]
fn correlation_consistency_matches_oracle_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in 2..=8 {
        let (f, fp, t) = (common::prob_rows(&mut rng, n, 4), common::prob_rows(&mut rng, n, 4), common::prob_rows(&mut rng, n, 4));
        let got = common::cc_value(&f, &fp, &t);
        let want = common::correlation_consistency(&f, &fp, &t, &t);
        assert!((got - want).abs() < 1e-10, "n={n}: {got} vs {want}");
    }
}

#[test]
fn opposite_view_targets_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (f, fp, t, tp) = (
        common::prob_rows(&mut rng, 6, 3),
        common::prob_rows(&mut rng, 6, 3),
        common::prob_rows(&mut rng, 6, 3),
        common::prob_rows(&mut rng, 6, 3),
    );
    let mut g = Graph::new();
    let batch = CorrelationBatch {
        f: g.constant(tensor(&f)),
        f_prime: g.constant(tensor(&fp)),
        target: g.constant(tensor(&t)),
        target_prime: g.constant(tensor(&tp)),
        indices: Vec::new(),
    };
    let l = losses::correlation_consistency(&mut g, &batch).unwrap();
    assert!((g.value(l).item() - common::correlation_consistency(&f, &fp, &t, &tp)).abs() < 1e-10);
}

#[test]
fn info_nce_hand_case() {
    // two class-0 unit vectors orthogonal to one class-1 vector, τ = 1
    let f = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    let classes = [0, 0, 1];
    // each of the two anchors: −log(e⁰ / (e⁰ + e⁰)) = ln 2
    let expected = 2f64.ln();
    assert!((common::info_nce(&f, &classes, 1.0).unwrap() - expected).abs() < 1e-12);
    assert!((common::nce_value(&f, &classes, 1.0) - expected).abs() < 1e-10);
}

#[test]
fn info_nce_matches_oracle_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..20 {
        let n = 8;
        let f = common::prob_rows(&mut rng, n, 4);
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let Some(want) = common::info_nce(&f, &classes, 0.1) else { continue };
        let got = common::nce_value(&f, &classes, 0.1);
        assert!((got - want).abs() < 1e-10, "trial {trial}: {got} vs {want}");
    }
}

#[test]
fn consistency_matches_per_pixel_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (p, pp, y) = (common::prob_rows(&mut rng, 30, 4), common::prob_rows(&mut rng, 30, 4), common::prob_rows(&mut rng, 30, 4));
    let valid: Vec<bool> = (0..30).map(|_| rng.random_bool(0.7)).collect();
    let mut g = Graph::new();
    let (a, b, c) = (g.constant(tensor(&p)), g.constant(tensor(&pp)), g.constant(tensor(&y)));
    let l = losses::consistency_loss(&mut g, a, b, c, &valid).unwrap();
    assert!((g.value(l).item() - common::consistency(&p, &pp, &y, &valid)).abs() < 1e-12);
}

#[test]
fn supervised_ce_matches_per_pixel_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (c, h, w) = (3, 4, 5);
    let logits: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
    let labels: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..3)).collect();
    let mut want = 0.0;
    for px in 0..h * w {
        let z: Vec<f64> = (0..c).map(|k| logits[k * h * w + px]).collect();
        want += common::smoothed_ce(&z, labels[px] as usize, 0.1);
    }
    want /= (h * w) as f64;
    let mut g = Graph::new();
    let id = g.constant(Tensor::new(&[c, h, w], logits).unwrap());
    let l = losses::supervised_ce(&mut g, id, &labels, 0.1).unwrap();
    assert!((g.value(l).item() - want).abs() < 1e-12);
}

#[test]
fn loss_gradients_match_and_targets_stay_frozen() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f = tensor(&common::prob_rows(&mut rng, 6, 4));
    let fp = tensor(&common::prob_rows(&mut rng, 6, 4));
    let t = tensor(&common::prob_rows(&mut rng, 6, 4));
    let classes = [0, 1, 0, 2, 1, 0];
    let report = gradcheck::check(&[f, fp, t], DEFAULT_STEP, DEFAULT_FLOOR, |g, x| {
        let batch = CorrelationBatch {
            f: x[0],
            f_prime: x[1],
            target: x[2],
            target_prime: x[2],
            indices: Vec::new(),
        };
        let cc = losses::correlation_consistency(g, &batch)?;
        let u = losses::consistency_loss(g, x[0], x[1], x[2], &[true, false, true, true, true, true])?;
        let nce = losses::info_nce(g, x[0], &classes, 0.1)?;
        let s = g.add(cc, u)?;
        g.add(s, nce)
    })
    .unwrap();
    // the target input must not receive any gradient through the graph
    assert!(report.analytic[2].data().iter().all(|&v| v == 0.0));
    // finite differences do see the target, so only compare the student inputs
    for k in 0..2 {
        for (a, n) in report.analytic[k].data().iter().zip(report.numeric[k].data()) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(DEFAULT_FLOOR);
            assert!(rel < 1e-4, "input {k}: {a} vs {n}");
        }
    }
}

fn rows_strategy(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n)
        .prop_map(|rows| rows.iter().map(|r| common::softmax(r)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cc_nonnegative_and_permutation_invariant(
        f in rows_strategy(6, 3),
        fp in rows_strategy(6, 3),
        t in rows_strategy(6, 3),
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let base = common::cc_value(&f, &fp, &t);
        prop_assert!(base >= 0.0);
        let pick = |rows: &[Vec<f64>]| perm.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>();
        let permuted = common::cc_value(&pick(&f), &pick(&fp), &pick(&t));
        prop_assert!((base - permuted).abs() < 1e-10);
    }

    #[test]
    fn cc_vanishes_only_when_all_correlations_agree(f in rows_strategy(5, 3)) {
        prop_assert!(common::cc_value(&f, &f, &f).abs() < 1e-10);
    }
}

#[test]
fn single_flip_moves_info_nce_more_than_correlation_consistency() {
    let rate = common::flip_sensitivity_rate(2024, 1000, 0.1);
    println!("tau 0.1: rate {rate:.3}");
    assert!(rate >= 0.8, "rate {rate}");
    for tau in [0.07, 0.5] {
        println!("tau {tau}: rate {:.3}", common::flip_sensitivity_rate(2024, 1000, tau));
    }
}
