mod common;

use common::gradcases::{self, random};
use mvcc_core::tensor::gradcheck::{self, DEFAULT_FLOOR, DEFAULT_STEP};
use mvcc_core::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_case_in_the_table_passes() {
    let cases = gradcases::cases();
    assert!(cases.len() >= 100, "only {} cases", cases.len());
    assert!(cases.iter().filter(|c| c.composite).count() >= 3);
    let failures: Vec<String> = cases
        .iter()
        .map(gradcases::run)
        .filter(|o| !o.passes())
        .map(|o| format!("{}: {:e}", o.name, o.max_rel_error))
        .collect();
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn exp_of_square_at_half_matches_hand_derivative() {
    // d/dx exp(x²) = 2x·exp(x²) = e^{1/4} at x = 1/2
    let report = gradcheck::check(&[Tensor::scalar(0.5)], DEFAULT_STEP, DEFAULT_FLOOR, |g, x| {
        let s = g.square(x[0])?;
        g.exp(s)
    })
    .unwrap();
    assert!((report.analytic[0].item() - 0.25f64.exp()).abs() < 1e-12);
    assert!(report.passes(1e-6));
}

#[test]
fn shared_node_accumulates_both_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = random(&mut rng, &[3, 3], -1.0, 1.0);
    let report = gradcheck::check(&[a], DEFAULT_STEP, DEFAULT_FLOOR, |g, x| {
        let s = g.softmax_rows(x[0])?;
        let p = g.matmul(s, x[0])?;
        let q = g.mul(p, s)?;
        let f = g.frobenius_sq(q)?;
        let m = g.mean(s)?;
        g.add(f, m)
    })
    .unwrap();
    assert!(report.passes(1e-4), "{:e}", report.max_rel_error);
}

#[test]
fn leaf_gradients_accumulate_until_zeroed() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
    let y = g.square(x).unwrap();
    let l = g.sum(y).unwrap();
    g.backward(l).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, -8.0]);
    g.zero_grad();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0]);
}
