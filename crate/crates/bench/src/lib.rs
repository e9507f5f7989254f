//! Shared fixtures for the criterion benchmarks.

use mvcc_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded tensor with entries uniform in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("consistent shape")
}

/// Seeded `rows×cols` matrix whose rows are probability vectors.
pub fn prob_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut t = random_tensor(&[rows, cols], seed);
    for row in t.data_mut().chunks_mut(cols) {
        let m = row.iter().copied().fold(f64::MIN, f64::max);
        row.iter_mut().for_each(|v| *v = (3.0 * (*v - m)).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}
