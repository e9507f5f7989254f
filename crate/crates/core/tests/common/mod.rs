//! Scalar brute-force oracles. They follow the loss formulas term by term
//! with plain loops and share no code with the vectorized graph versions.
#![allow(dead_code)]

pub mod gradcases;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rows of the L2-row-normalized self-correlation matrix.
pub fn normalized_correlation(f: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = f.len();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = dot(&f[i], &f[j]);
        }
        let norm = a[i].iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for j in 0..n {
            a[i][j] /= norm;
        }
    }
    a
}

pub fn correlation_consistency(f: &[Vec<f64>], fp: &[Vec<f64>], t: &[Vec<f64>], tp: &[Vec<f64>]) -> f64 {
    let n = f.len();
    let (a, ap, at, atp) = (
        normalized_correlation(f),
        normalized_correlation(fp),
        normalized_correlation(t),
        normalized_correlation(tp),
    );
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += (a[i][j] - at[i][j]).powi(2) + (ap[i][j] - atp[i][j]).powi(2);
        }
    }
    s / n as f64
}

/// Mean over (anchor, positive) pairs of the InfoNCE term; `None` without pairs.
pub fn info_nce(f: &[Vec<f64>], classes: &[usize], tau: f64) -> Option<f64> {
    let n = f.len();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..n {
        let neg: f64 = (0..n)
            .filter(|&k| classes[k] != classes[i])
            .map(|k| (dot(&f[i], &f[k]) / tau).exp())
            .sum();
        for j in 0..n {
            if j == i || classes[j] != classes[i] {
                continue;
            }
            let pos = (dot(&f[i], &f[j]) / tau).exp();
            total += -(pos / (pos + neg)).ln();
            pairs += 1;
        }
    }
    (pairs > 0).then(|| total / pairs as f64)
}

pub fn consistency(p: &[Vec<f64>], pp: &[Vec<f64>], y: &[Vec<f64>], valid: &[bool]) -> f64 {
    let mut s = 0.0;
    let mut count = 0;
    for k in 0..p.len() {
        if !valid[k] {
            continue;
        }
        count += 1;
        for c in 0..y[k].len() {
            s += (p[k][c] - y[k][c]).powi(2) + (pp[k][c] - y[k][c]).powi(2);
        }
    }
    s / count as f64
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Smoothed cross-entropy of one pixel's logits.
pub fn smoothed_ce(z: &[f64], label: usize, eps: f64) -> f64 {
    let p = softmax(z);
    let c = z.len();
    (0..c)
        .map(|k| {
            let t = if k == label { 1.0 - eps } else { eps / (c - 1) as f64 };
            -t * p[k].ln()
        })
        .sum()
}

/// Low-frequency test image: a few sinusoids with at most two cycles per side.
pub fn smooth_image(c: usize, h: usize, w: usize, seed: u64) -> mvcc_core::Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        let (fx, fy): (f64, f64) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
        let (px, py): (f64, f64) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
        for i in 0..h {
            for j in 0..w {
                let x = j as f64 / w as f64 * std::f64::consts::TAU;
                let y = i as f64 / h as f64 * std::f64::consts::TAU;
                data.push(0.5 + 0.2 * (fx * x + px).sin() + 0.2 * (fy * y + py).cos());
            }
        }
    }
    mvcc_core::Tensor::new(&[c, h, w], data).unwrap()
}

/// One trial of the single-flip sensitivity experiment: relative change of
/// InfoNCE and of correlation consistency when one pseudo label is flipped.
pub fn flip_sensitivity<R: rand::Rng>(rng: &mut R, n: usize, d: usize, tau: f64) -> (f64, f64) {
    use mvcc_core::losses::{self, CorrelationBatch};
    use mvcc_core::model::{flip_soft_label, FLIP_MARGIN};
    use mvcc_core::sampler::hard_labels;
    use mvcc_core::{Graph, Tensor};
    use rand_distr::{Distribution, StandardNormal};

    // Teacher logits favour a random class by +2; the student's two views see
    // the same logits plus unit noise, so features track the targets.
    let mut target = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n);
    let mut feats_prime = Vec::with_capacity(n);
    for _ in 0..n {
        let favoured = rng.random_range(0..d);
        let z: Vec<f64> = (0..d)
            .map(|c| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) + if c == favoured { 2.0 } else { 0.0 })
            .collect();
        let mut noisy = |z: &[f64]| softmax(&z.iter().map(|v| v + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect::<Vec<_>>());
        feats.push(noisy(&z));
        feats_prime.push(noisy(&z));
        target.push(softmax(&z));
    }
    let classes: Vec<usize> = target.iter().map(|r| hard_labels(r, d)[0]).collect();
    let i = rng.random_range(0..n);
    let mut k = rng.random_range(0..d - 1);
    if k >= classes[i] {
        k += 1;
    }
    let mut noisy_classes = classes.clone();
    noisy_classes[i] = k;
    let mut noisy_target = target.clone();
    flip_soft_label(&mut noisy_target[i], k, FLIP_MARGIN);

    let nce = |cls: &[usize]| {
        let mut g = Graph::new();
        let f = g.constant(Tensor::from_rows(&feats).unwrap());
        let l = losses::info_nce(&mut g, f, cls, tau).ok()?;
        Some(g.value(l).item())
    };
    let cc = |t: &[Vec<f64>]| {
        let mut g = Graph::new();
        let tt = g.constant(Tensor::from_rows(t).unwrap());
        let batch = CorrelationBatch {
            f: g.constant(Tensor::from_rows(&feats).unwrap()),
            f_prime: g.constant(Tensor::from_rows(&feats_prime).unwrap()),
            target: tt,
            target_prime: tt,
            indices: Vec::new(),
        };
        let l = losses::correlation_consistency(&mut g, &batch).unwrap();
        g.value(l).item()
    };
    let (Some(n0), Some(n1)) = (nce(&classes), nce(&noisy_classes)) else {
        return (f64::NAN, f64::NAN);
    };
    let (c0, c1) = (cc(&target), cc(&noisy_target));
    ((n1 - n0).abs() / n0, (c1 - c0).abs() / c0)
}

/// Fraction of trials where InfoNCE reacts relatively more than L_CC.
pub fn flip_sensitivity_rate(seed: u64, trials: usize, tau: f64) -> f64 {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut wins = 0;
    for _ in 0..trials {
        let (nce, cc) = flip_sensitivity(&mut rng, 32, 4, tau);
        wins += usize::from(nce > cc);
    }
    wins as f64 / trials as f64
}

/// Warps `img` by `t`, aligns it back and returns the L∞ error over
/// doubly-valid pixels together with how many pixels were checked. A pixel
/// counts when its canonical sample and every view pixel in its bilinear
/// footprint read fully in-bounds data.
pub fn warp_roundtrip_linf(img: &mvcc_core::Tensor, t: &mvcc_core::geometry::AffineTransform) -> (f64, usize) {
    use mvcc_core::geometry::{align_to_canonical, make_grid, warp};
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (view, _) = warp(img, t).unwrap();
    let (back, back_valid) = align_to_canonical(&view, t).unwrap();
    let fwd = make_grid(t, h, w);
    let inv = make_grid(&t.invert().unwrap(), h, w);
    let pixel = |x: f64, y: f64| (((x + 1.0) * w as f64 - 1.0) / 2.0, ((y + 1.0) * h as f64 - 1.0) / 2.0);
    let inside = |x: f64, y: f64| {
        let (u, v) = pixel(x, y);
        (0.0..=(w - 1) as f64).contains(&u) && (0.0..=(h - 1) as f64).contains(&v)
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for p in 0..h * w {
        let [x, y] = inv.coords()[p];
        if !back_valid[p] || !inside(x, y) {
            continue;
        }
        let (u, v) = pixel(x, y);
        let (u0, v0) = (u.floor() as usize, v.floor() as usize);
        let footprint = [(v0, u0), (v0, u0 + 1), (v0 + 1, u0), (v0 + 1, u0 + 1)];
        let interior = footprint.iter().all(|&(r, c)| {
            let [sx, sy] = fwd.coord(r.min(h - 1), c.min(w - 1));
            inside(sx, sy)
        });
        if !interior {
            continue;
        }
        checked += 1;
        for ch in 0..c {
            let k = ch * h * w + p;
            worst = worst.max((back.data()[k] - img.data()[k]).abs());
        }
    }
    (worst, checked)
}

pub fn prob_rows(rng: &mut rand_chacha::ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| softmax(&(0..d).map(|_| rand::Rng::random_range(rng, -2.0..2.0)).collect::<Vec<_>>()))
        .collect()
}

pub fn tensor(rows: &[Vec<f64>]) -> mvcc_core::Tensor {
    mvcc_core::Tensor::from_rows(rows).unwrap()
}

pub fn cc_value(f: &[Vec<f64>], fp: &[Vec<f64>], t: &[Vec<f64>]) -> f64 {
    let mut g = mvcc_core::Graph::new();
    let target = g.constant(tensor(t));
    let batch = mvcc_core::losses::CorrelationBatch {
        f: g.constant(tensor(f)),
        f_prime: g.constant(tensor(fp)),
        target,
        target_prime: target,
        indices: (0..f.len()).collect(),
    };
    let l = mvcc_core::losses::correlation_consistency(&mut g, &batch).unwrap();
    g.value(l).item()
}

pub fn nce_value(f: &[Vec<f64>], classes: &[usize], tau: f64) -> f64 {
    let mut g = mvcc_core::Graph::new();
    let id = g.constant(tensor(f));
    let l = mvcc_core::losses::info_nce(&mut g, id, classes, tau).unwrap();
    g.value(l).item()
}

