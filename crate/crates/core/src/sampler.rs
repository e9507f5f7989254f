//! Category-normalized pixel sampling.
//!
//! Pixels are drawn with probability inversely proportional to how common
//! their pseudo class is in the mini-batch, so every class present receives
//! the same expected share of the `N` samples.

use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;

use crate::error::{Error, Result};

/// Per-row argmax of an `M×C` probability buffer; ties go to the lowest class.
pub fn hard_labels(probs: &[f64], classes: usize) -> Vec<usize> {
    probs
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Empirical class frequencies over eligible pixels.
pub fn class_distribution(hard: &[usize], eligible: &[bool], classes: usize) -> Result<Vec<f64>> {
    if hard.len() != eligible.len() {
        return Err(Error::dim("class_distribution", "label and mask lengths differ"));
    }
    let mut counts = vec![0usize; classes];
    for (&c, _) in hard.iter().zip(eligible).filter(|(_, &e)| e) {
        if c >= classes {
            return Err(Error::Domain {
                op: "class_distribution",
                detail: format!("class {c} outside 0..{classes}"),
            });
        }
        counts[c] += 1;
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty("no eligible pixels to estimate the class distribution"));
    }
    Ok(counts.into_iter().map(|n| n as f64 / total as f64).collect())
}

/// `q_j ∝ 1/p_{c(j)}` over eligible pixels, normalized to sum to one.
pub fn sampling_weights(hard: &[usize], p: &[f64], eligible: &[bool]) -> Vec<f64> {
    let mut w: Vec<f64> = hard
        .iter()
        .zip(eligible)
        .map(|(&c, &e)| if e && p[c] > 0.0 { 1.0 / p[c] } else { 0.0 })
        .collect();
    let z: f64 = w.iter().sum();
    if z > 0.0 {
        w.iter_mut().for_each(|v| *v /= z);
    }
    w
}

#[derive(Clone, Debug)]
pub struct SampleSpec {
    pub n: usize,
    pub weights: Vec<f64>,
    pub eligible: Vec<bool>,
}

impl SampleSpec {
    /// Builds category-normalized weights for drawing `n` pixels.
    pub fn category_normalized(hard: &[usize], eligible: &[bool], classes: usize, n: usize) -> Result<Self> {
        let p = class_distribution(hard, eligible, classes)?;
        Ok(Self {
            n,
            weights: sampling_weights(hard, &p, eligible),
            eligible: eligible.to_vec(),
        })
    }
}

/// Draws `spec.n` pixel indices i.i.d. with replacement.
///
/// Alias-table construction is O(#pixels) and each draw is O(1).
pub fn sample_pixels<R: Rng + ?Sized>(spec: &SampleSpec, rng: &mut R) -> Result<Vec<usize>> {
    if !spec.weights.iter().any(|&w| w > 0.0) {
        return Err(Error::Empty("no eligible pixels to sample"));
    }
    let table = WeightedAliasIndex::new(spec.weights.clone())
        .map_err(|e| Error::Config(format!("sampling weights rejected: {e}")))?;
    Ok((0..spec.n).map(|_| table.sample(rng)).collect())
}
