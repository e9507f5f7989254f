//! Training objectives.
//!
//! Dense maps arrive as `C×H×W` nodes; per-pixel losses work on `(H·W)×C`
//! pixel rows. All unlabeled losses are means (per valid pixel, per sampled
//! row) so their scale does not depend on batch or crop size.

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Label value excluded from the supervised loss.
pub const IGNORE_LABEL: u8 = 255;

/// Reshapes a `C×H×W` node into `(H·W)×C` pixel rows.
pub fn to_pixel_rows(g: &mut Graph, map: NodeId) -> Result<NodeId> {
    let &[c, h, w] = g.shape(map) else {
        return Err(Error::dim("to_pixel_rows", format!("expected C×H×W, got {:?}", g.shape(map))));
    };
    let flat = g.reshape(map, &[c, h * w])?;
    g.transpose(flat)
}

/// Inverse of [`to_pixel_rows`].
pub fn from_pixel_rows(g: &mut Graph, rows: NodeId, h: usize, w: usize) -> Result<NodeId> {
    let t = g.transpose(rows)?;
    let c = g.shape(t)[0];
    g.reshape(t, &[c, h, w])
}

/// Smoothed one-hot rows: `1 − ε` on the true class, `ε/(C−1)` elsewhere;
/// ignored pixels get an all-zero row.
fn smoothed_targets(labels: &[u8], classes: usize, smoothing: f64) -> Result<(Tensor, usize)> {
    let off = if classes > 1 { smoothing / (classes - 1) as f64 } else { 0.0 };
    let mut data = vec![0.0; labels.len() * classes];
    let mut counted = 0;
    for (row, &l) in data.chunks_exact_mut(classes).zip(labels) {
        if l == IGNORE_LABEL {
            continue;
        }
        let l = l as usize;
        if l >= classes {
            return Err(Error::Domain {
                op: "supervised_ce",
                detail: format!("label {l} outside 0..{classes}"),
            });
        }
        row.fill(off);
        row[l] = 1.0 - smoothing;
        counted += 1;
    }
    Ok((Tensor::new(&[labels.len(), classes], data)?, counted))
}

/// Cross-entropy against label-smoothed targets, averaged over every
/// non-ignored pixel of the batch.
pub fn supervised_ce_batch(g: &mut Graph, logits: &[NodeId], labels: &[&[u8]], smoothing: f64) -> Result<NodeId> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::dim("supervised_ce", "need one label map per logit map"));
    }
    let mut rows = Vec::with_capacity(logits.len());
    let mut all_labels = Vec::new();
    for (&l, lab) in logits.iter().zip(labels) {
        let r = to_pixel_rows(g, l)?;
        if g.shape(r)[0] != lab.len() {
            return Err(Error::dim(
                "supervised_ce",
                format!("{} pixels vs {} labels", g.shape(r)[0], lab.len()),
            ));
        }
        rows.push(r);
        all_labels.extend_from_slice(lab);
    }
    let rows = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
    let classes = g.shape(rows)[1];
    let (targets, counted) = smoothed_targets(&all_labels, classes, smoothing)?;
    if counted == 0 {
        return Err(Error::Empty("every pixel carries the ignore label"));
    }
    let logp = g.log_softmax_rows(rows)?;
    let t = g.constant(targets);
    let prod = g.mul(logp, t)?;
    let s = g.sum(prod)?;
    g.scale(s, -1.0 / counted as f64)
}

/// Single-image form of [`supervised_ce_batch`].
pub fn supervised_ce(g: &mut Graph, logits: NodeId, labels: &[u8], smoothing: f64) -> Result<NodeId> {
    supervised_ce_batch(g, &[logits], &[labels], smoothing)
}

/// Mean over valid pixels of `‖p − ŷ‖² + ‖p′ − ŷ‖²` on `M×C` pixel rows.
/// `pseudo` is detached before use.
pub fn consistency_loss(g: &mut Graph, p: NodeId, p_prime: NodeId, pseudo: NodeId, valid: &[bool]) -> Result<NodeId> {
    let shape = g.shape(p).to_vec();
    if g.shape(p_prime) != shape || g.shape(pseudo) != shape || shape.len() != 2 || shape[0] != valid.len() {
        return Err(Error::dim("consistency_loss", "maps and mask must agree"));
    }
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(Error::Empty("consistency loss needs at least one valid pixel"));
    }
    let c = shape[1];
    let mask: Vec<f64> = valid
        .iter()
        .flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, c))
        .collect();
    let mask = g.constant(Tensor::new(&shape, mask)?);
    let target = g.detach(pseudo);
    let mut total = None;
    for view in [p, p_prime] {
        let d = g.sub(view, target)?;
        let d = g.mul(d, mask)?;
        let sq = g.frobenius_sq(d)?;
        total = Some(match total {
            None => sq,
            Some(t) => g.add(t, sq)?,
        });
    }
    g.scale(total.expect("two views"), 1.0 / count as f64)
}

/// `F · Fᵀ` for `N×D` feature rows.
pub fn correlation_matrix(g: &mut Graph, f: NodeId) -> Result<NodeId> {
    let ft = g.transpose(f)?;
    g.matmul(f, ft)
}

/// Row-normalized self-correlation `Ã = l2_normalize_rows(F·Fᵀ)`.
pub fn normalized_correlation(g: &mut Graph, f: NodeId) -> Result<NodeId> {
    let a = correlation_matrix(g, f)?;
    g.l2_normalize_rows(a)
}

/// Sampled rows for the correlation-consistency loss.
///
/// `target` is paired with `f` and `target_prime` with `f_prime`; with the
/// averaged pseudo label both are the same node. Targets are detached.
#[derive(Clone, Debug)]
pub struct CorrelationBatch {
    pub f: NodeId,
    pub f_prime: NodeId,
    pub target: NodeId,
    pub target_prime: NodeId,
    /// Sampled canonical pixel indices (bookkeeping only).
    pub indices: Vec<usize>,
}

/// `(1/N)·(‖Ã − Ã_t‖²_F + ‖Ã′ − Ã′_t‖²_F)`.
pub fn correlation_consistency(g: &mut Graph, batch: &CorrelationBatch) -> Result<NodeId> {
    let shape = g.shape(batch.f).to_vec();
    for id in [batch.f_prime, batch.target, batch.target_prime] {
        if g.shape(id) != shape {
            return Err(Error::dim(
                "correlation_consistency",
                format!("{:?} vs {:?}", g.shape(id), shape),
            ));
        }
    }
    let &[n, _] = shape.as_slice() else {
        return Err(Error::dim("correlation_consistency", "features must be N×D"));
    };
    if n < 2 {
        return Err(Error::dim("correlation_consistency", "need at least two rows"));
    }
    let target = g.detach(batch.target);
    let target_prime = if batch.target_prime == batch.target {
        target
    } else {
        g.detach(batch.target_prime)
    };
    let a_t = normalized_correlation(g, target)?;
    let a_t_prime = if target_prime == target {
        a_t
    } else {
        normalized_correlation(g, target_prime)?
    };
    let a = normalized_correlation(g, batch.f)?;
    let a_prime = normalized_correlation(g, batch.f_prime)?;
    let d1 = g.sub(a, a_t)?;
    let d2 = g.sub(a_prime, a_t_prime)?;
    let s1 = g.frobenius_sq(d1)?;
    let s2 = g.frobenius_sq(d2)?;
    let s = g.add(s1, s2)?;
    g.scale(s, 1.0 / n as f64)
}

/// Supervised-contrastive InfoNCE over pseudo classes, averaged over
/// `(anchor, positive)` pairs. Positives share the anchor's class (other
/// rows only); negatives are all rows of a different class.
pub fn info_nce(g: &mut Graph, f: NodeId, classes: &[usize], tau: f64) -> Result<NodeId> {
    let &[n, _] = g.shape(f) else {
        return Err(Error::dim("info_nce", "features must be N×D"));
    };
    if classes.len() != n || n < 2 {
        return Err(Error::dim("info_nce", format!("{n} rows vs {} classes", classes.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let mut pos = vec![0.0; n * n];
    let mut neg = vec![0.0; n * n];
    let mut pairs = 0usize;
    for i in 0..n {
        for j in 0..n {
            if classes[i] != classes[j] {
                neg[i * n + j] = 1.0;
            } else if i != j {
                pos[i * n + j] = 1.0;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::Empty("no anchor has a positive partner"));
    }
    let sim = correlation_matrix(g, f)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    // Shifting each row by a constant leaves every term unchanged.
    let shift: Vec<f64> = g
        .value(logits)
        .rows()
        .flat_map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            std::iter::repeat_n(m, n)
        })
        .collect();
    let shift = g.constant(Tensor::new(&[n, n], shift)?);
    let logits = g.sub(logits, shift)?;
    let e = g.exp(logits)?;
    let neg = g.constant(Tensor::new(&[n, n], neg)?);
    let ones_col = g.constant(Tensor::full(&[n, 1], 1.0));
    let ones_row = g.constant(Tensor::full(&[1, n], 1.0));
    let e_neg = g.mul(e, neg)?;
    let neg_sum = g.matmul(e_neg, ones_col)?;
    let neg_sum = g.matmul(neg_sum, ones_row)?;
    let denom = g.add(e, neg_sum)?;
    let log_denom = g.log(denom)?;
    let per_pair = g.sub(log_denom, logits)?;
    let pos = g.constant(Tensor::new(&[n, n], pos)?);
    let masked = g.mul(per_pair, pos)?;
    let s = g.sum(masked)?;
    g.scale(s, 1.0 / pairs as f64)
}

/// Coefficients of the unlabeled terms in the total loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub unsup: f64,
    pub cc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { unsup: 0.1, cc: 0.1 }
    }
}

/// `L_L + w_U·L_U + w_CC·L_CC`.
pub fn total_loss(g: &mut Graph, l_sup: NodeId, l_unsup: NodeId, l_cc: NodeId, w: LossWeights) -> Result<NodeId> {
    let u = g.scale(l_unsup, w.unsup)?;
    let c = g.scale(l_cc, w.cc)?;
    let s = g.add(l_sup, u)?;
    g.add(s, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &Graph, id: NodeId) -> f64 {
        g.value(id).item()
    }

    #[test]
    fn ce_uniform_logits_is_log_classes() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[4, 2, 2]));
        let l = supervised_ce(&mut g, logits, &[0, 1, 2, 3], 0.0).unwrap();
        assert!((scalar(&g, l) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_confident_correct_logits_vanish() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(&[2, 1, 1], vec![50.0, -50.0]).unwrap());
        let l = supervised_ce(&mut g, logits, &[0], 0.0).unwrap();
        assert!(scalar(&g, l) < 1e-40);
    }

    #[test]
    fn ce_hand_computed_with_smoothing() {
        let z = [1.0f64, -0.5, 2.0];
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        // true class 2; ε = 0.1 spread as 0.05 over the other two classes
        let expected = -(0.05 * (z[0] - lse) + 0.05 * (z[1] - lse) + 0.9 * (z[2] - lse));
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(&[3, 1, 1], z.to_vec()).unwrap());
        let l = supervised_ce(&mut g, logits, &[2], 0.1).unwrap();
        assert!((scalar(&g, l) - expected).abs() < 1e-12);
    }

    #[test]
    fn ce_ignored_pixels() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[2, 1, 2]));
        assert!(matches!(
            supervised_ce(&mut g, logits, &[IGNORE_LABEL, IGNORE_LABEL], 0.1),
            Err(Error::Empty(_))
        ));
        let l = supervised_ce(&mut g, logits, &[IGNORE_LABEL, 1], 0.0).unwrap();
        assert!((scalar(&g, l) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn consistency_known_values() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let y = g.constant(Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap());
        let l = consistency_loss(&mut g, p, p, y, &[true]).unwrap();
        assert!((scalar(&g, l) - 1.0).abs() < 1e-15);
        let z = consistency_loss(&mut g, y, y, y, &[true]).unwrap();
        assert_eq!(scalar(&g, z), 0.0);
        assert!(consistency_loss(&mut g, p, p, y, &[false]).is_err());
    }

    #[test]
    fn correlation_of_one_hots_is_identity() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
        let a = correlation_matrix(&mut g, f).unwrap();
        assert_eq!(g.value(a), g.value(f));
        let u = g.constant(Tensor::new(&[2, 2], vec![0.6, 0.8, 0.6, 0.8]).unwrap());
        let a = correlation_matrix(&mut g, u).unwrap();
        assert!(g.value(a).data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn correlation_consistency_zero_at_fixed_point() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(&[3, 2], vec![0.9, 0.1, 0.3, 0.7, 0.5, 0.5]).unwrap());
        let batch = CorrelationBatch {
            f,
            f_prime: f,
            target: f,
            target_prime: f,
            indices: vec![0, 1, 2],
        };
        let l = correlation_consistency(&mut g, &batch).unwrap();
        assert_eq!(scalar(&g, l), 0.0);
    }

    #[test]
    fn info_nce_without_negatives_is_zero() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(&[2, 2], vec![0.3, 0.7, 0.6, 0.4]).unwrap());
        let l = info_nce(&mut g, f, &[1, 1], 0.1).unwrap();
        assert!(scalar(&g, l).abs() < 1e-15);
        assert!(matches!(info_nce(&mut g, f, &[0, 1], 0.1), Err(Error::Empty(_))));
    }

    #[test]
    fn total_loss_weights() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::scalar(1.0));
        let zero = g.constant(Tensor::scalar(0.0));
        let t = total_loss(&mut g, one, zero, zero, LossWeights::default()).unwrap();
        assert_eq!(scalar(&g, t), 1.0);
        let t = total_loss(&mut g, one, one, one, LossWeights::default()).unwrap();
        assert!((scalar(&g, t) - 1.2).abs() < 1e-15);
        let mut last = f64::NEG_INFINITY;
        for cc in [0.01, 0.05, 0.1, 0.5] {
            let t = total_loss(&mut g, one, one, one, LossWeights { unsup: 0.1, cc }).unwrap();
            assert!(scalar(&g, t) > last);
            last = scalar(&g, t);
        }
    }
}
