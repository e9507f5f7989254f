//! Table of finite-difference gradient cases: every differentiable graph
//! operation over several random shapes, plus randomized composite graphs.

use std::sync::Arc;

use mvcc_core::tensor::gradcheck::{self, DEFAULT_FLOOR, DEFAULT_STEP};
use mvcc_core::tensor::SparseTaps;
use mvcc_core::{Graph, NodeId, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OP_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;
const SEEDS: u64 = 5;

type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

pub struct GradCase {
    pub name: String,
    pub composite: bool,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

pub struct Outcome {
    pub name: String,
    pub composite: bool,
    pub max_rel_error: f64,
}

impl Outcome {
    pub fn passes(&self) -> bool {
        self.max_rel_error < if self.composite { COMPOSITE_TOL } else { OP_TOL }
    }
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU stays off its kink under the
/// finite-difference step.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape, -1.0, 1.0);
    t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (0.05 + v.abs()));
    t
}

/// Weighted sum so that every output entry gets a distinct upstream gradient.
pub fn probe(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = random(&mut rng, g.shape(x), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    g.sum(p)
}

fn case(name: &str, seed: u64, composite: bool, inputs: Vec<Tensor>, build: Build) -> GradCase {
    GradCase {
        name: format!("{name}#{seed}"),
        composite,
        inputs,
        build,
    }
}

fn unary(name: &str, seed: u64, input: Tensor, f: fn(&mut Graph, NodeId) -> Result<NodeId>) -> GradCase {
    case(
        name,
        seed,
        false,
        vec![input],
        Box::new(move |g, x| {
            let y = f(g, x[0])?;
            probe(g, y, seed)
        }),
    )
}

fn binary(name: &str, seed: u64, a: Tensor, b: Tensor, f: fn(&mut Graph, NodeId, NodeId) -> Result<NodeId>) -> GradCase {
    case(
        name,
        seed,
        false,
        vec![a, b],
        Box::new(move |g, x| {
            let y = f(g, x[0], x[1])?;
            probe(g, y, seed)
        }),
    )
}

fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let (r, c) = (rng.random_range(2..6), rng.random_range(2..6));
    let k = rng.random_range(2..5);
    let m = |rng: &mut ChaCha8Rng| random(rng, &[r, c], -1.0, 1.0);
    let pos = |rng: &mut ChaCha8Rng| random(rng, &[r, c], 0.2, 2.0);
    let mut out = vec![
        binary("add", seed, m(&mut rng), m(&mut rng), |g, a, b| g.add(a, b)),
        binary("sub", seed, m(&mut rng), m(&mut rng), |g, a, b| g.sub(a, b)),
        binary("mul", seed, m(&mut rng), m(&mut rng), |g, a, b| g.mul(a, b)),
        binary("mul_scalar", seed, m(&mut rng), random(&mut rng, &[], -1.0, 1.0), |g, a, b| g.mul(a, b)),
        unary("scale", seed, m(&mut rng), |g, a| g.scale(a, -1.7)),
        unary("square", seed, m(&mut rng), |g, a| g.square(a)),
        unary("log", seed, pos(&mut rng), |g, a| g.log(a)),
        unary("exp", seed, m(&mut rng), |g, a| g.exp(a)),
        unary("relu", seed, off_kink(&mut rng, &[r, c]), |g, a| g.relu(a)),
        unary("sum", seed, m(&mut rng), |g, a| {
            let s = g.sum(a)?;
            g.square(s)
        }),
        unary("mean", seed, m(&mut rng), |g, a| {
            let s = g.mean(a)?;
            g.exp(s)
        }),
        unary("frobenius_sq", seed, m(&mut rng), |g, a| g.frobenius_sq(a)),
        binary("matmul", seed, random(&mut rng, &[r, k], -1.0, 1.0), random(&mut rng, &[k, c], -1.0, 1.0), |g, a, b| {
            g.matmul(a, b)
        }),
        unary("transpose", seed, m(&mut rng), |g, a| g.transpose(a)),
        unary("softmax_rows", seed, random(&mut rng, &[r, c], -2.0, 2.0), |g, a| g.softmax_rows(a)),
        unary("log_softmax_rows", seed, random(&mut rng, &[r, c], -2.0, 2.0), |g, a| g.log_softmax_rows(a)),
        unary("l2_normalize_rows", seed, m(&mut rng), |g, a| g.l2_normalize_rows(a)),
        unary("l1_normalize_rows", seed, pos(&mut rng), |g, a| g.l1_normalize_rows(a)),
    ];
    let total = r * c;
    let shape = [r, c];
    out.push(case(
        "reshape",
        seed,
        false,
        vec![m(&mut rng)],
        Box::new(move |g, x| {
            let y = g.reshape(x[0], &[total])?;
            let y = g.square(y)?;
            let y = g.reshape(y, &[shape[1], shape[0]])?;
            probe(g, y, seed)
        }),
    ));
    let picks: Vec<usize> = (0..r + 2).map(|_| rng.random_range(0..r)).collect();
    out.push(case(
        "gather_rows",
        seed,
        false,
        vec![m(&mut rng)],
        Box::new(move |g, x| {
            let y = g.gather_rows(x[0], &picks)?;
            probe(g, y, seed)
        }),
    ));
    out.push(case(
        "concat_rows",
        seed,
        false,
        vec![m(&mut rng), random(&mut rng, &[k, c], -1.0, 1.0)],
        Box::new(move |g, x| {
            let y = g.concat_rows(&[x[0], x[1], x[0]])?;
            probe(g, y, seed)
        }),
    ));
    let (ci, co, h, w) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(3..7), rng.random_range(3..7));
    let ks = if seed.is_multiple_of(2) { 3 } else { 1 };
    out.push(case(
        "conv2d",
        seed,
        false,
        vec![
            random(&mut rng, &[ci, h, w], -1.0, 1.0),
            random(&mut rng, &[co, ci, ks, ks], -1.0, 1.0),
            random(&mut rng, &[co], -1.0, 1.0),
        ],
        Box::new(move |g, x| {
            let y = g.conv2d(x[0], x[1], x[2])?;
            probe(g, y, seed)
        }),
    ));
    let (ih, iw, oh, ow) = (rng.random_range(2..5), rng.random_range(2..5), rng.random_range(2..5), rng.random_range(2..5));
    let rows: Vec<Vec<(usize, f64)>> = (0..oh * ow)
        .map(|_| (0..rng.random_range(0..4)).map(|_| (rng.random_range(0..ih * iw), rng.random_range(0.0..1.0))).collect())
        .collect();
    let taps = Arc::new(SparseTaps::from_rows((ih, iw), (oh, ow), &rows).unwrap());
    out.push(case(
        "resample",
        seed,
        false,
        vec![random(&mut rng, &[2, ih, iw], -1.0, 1.0)],
        Box::new(move |g, x| {
            let y = g.resample(x[0], taps.clone())?;
            probe(g, y, seed)
        }),
    ));
    out
}

fn composite_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
    let (h, w) = (rng.random_range(3..6), rng.random_range(3..6));
    let classes = rng.random_range(2..4);
    let labels: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..classes)).collect();
    let mut onehot = Tensor::zeros(&[h * w, classes]);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * classes + l] = 1.0;
    }
    // two-layer conv net with a pixel-row cross-entropy
    let segnet = case(
        "composite_segnet",
        seed,
        true,
        vec![
            random(&mut rng, &[2, h, w], -1.0, 1.0),
            random(&mut rng, &[3, 2, 3, 3], -0.7, 0.7),
            random(&mut rng, &[3], 0.05, 0.3),
            random(&mut rng, &[classes, 3, 1, 1], -1.0, 1.0),
            random(&mut rng, &[classes], -0.2, 0.2),
        ],
        Box::new(move |g, x| {
            let y = g.conv2d(x[0], x[1], x[2])?;
            let y = g.relu(y)?;
            let z = g.conv2d(y, x[3], x[4])?;
            let z = g.reshape(z, &[classes, h * w])?;
            let rows = g.transpose(z)?;
            let logp = g.log_softmax_rows(rows)?;
            let t = g.constant(onehot.clone());
            let prod = g.mul(logp, t)?;
            let s = g.mean(prod)?;
            g.scale(s, -1.0)
        }),
    );
    // correlation-style loss against a fixed target
    let (n, d) = (rng.random_range(3..7), rng.random_range(2..5));
    let target = random(&mut rng, &[n, n], -1.0, 1.0);
    let correlation = case(
        "composite_correlation",
        seed,
        true,
        vec![random(&mut rng, &[n, d], -2.0, 2.0), random(&mut rng, &[n, d], -2.0, 2.0)],
        Box::new(move |g, x| {
            let mut total = None;
            for &f in &x[..2] {
                let p = g.softmax_rows(f)?;
                let pt = g.transpose(p)?;
                let a = g.matmul(p, pt)?;
                let a = g.l2_normalize_rows(a)?;
                let t = g.constant(target.clone());
                let diff = g.sub(a, t)?;
                let l = g.frobenius_sq(diff)?;
                total = Some(match total {
                    Some(prev) => g.add(prev, l)?,
                    None => l,
                });
            }
            let both = total.expect("two views");
            g.scale(both, 1.0 / n as f64)
        }),
    );
    // contrastive-style graph reusing one node along several paths
    let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let contrastive = case(
        "composite_contrastive",
        seed,
        true,
        vec![random(&mut rng, &[n, d], -1.0, 1.0)],
        Box::new(move |g, x| {
            let f = g.l2_normalize_rows(x[0])?;
            let ft = g.transpose(f)?;
            let sim = g.matmul(f, ft)?;
            let sim = g.scale(sim, 1.0 / 0.3)?;
            let logp = g.log_softmax_rows(sim)?;
            let picked = g.gather_rows(logp, &picks)?;
            let e = g.exp(picked)?;
            let l1 = g.l1_normalize_rows(e)?;
            let m = g.mean(picked)?;
            let s = probe(g, l1, seed)?;
            let s = g.sub(s, m)?;
            let sq = g.square(f)?;
            let extra = g.sum(sq)?;
            g.add(s, extra)
        }),
    );
    vec![segnet, correlation, contrastive]
}

pub fn cases() -> Vec<GradCase> {
    let mut out = Vec::new();
    for seed in 0..SEEDS {
        out.extend(op_cases(seed));
        out.extend(composite_cases(seed));
    }
    out
}

pub fn run(case: &GradCase) -> Outcome {
    let report = gradcheck::check(&case.inputs, DEFAULT_STEP, DEFAULT_FLOOR, &case.build)
        .unwrap_or_else(|e| panic!("{}: {e}", case.name));
    Outcome {
        name: case.name.clone(),
        composite: case.composite,
        max_rel_error: report.max_rel_error,
    }
}
