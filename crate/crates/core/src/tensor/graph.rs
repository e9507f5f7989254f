use std::sync::Arc;

use super::kernels::{self, ConvDims};
use super::Tensor;
use crate::error::{Error, Result};

/// Floor applied to row norms and row sums before dividing.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed sparse linear map between two pixel planes, applied identically to
/// every channel. Row `o` lists the `(input pixel, weight)` taps that produce
/// output pixel `o`. Bilinear resampling is expressed this way.
#[derive(Clone, Debug)]
pub struct SparseTaps {
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    offsets: Vec<usize>,
    index: Vec<u32>,
    weight: Vec<f64>,
}

impl SparseTaps {
    pub fn from_rows(in_hw: (usize, usize), out_hw: (usize, usize), rows: &[Vec<(usize, f64)>]) -> Result<Self> {
        if rows.len() != out_hw.0 * out_hw.1 {
            return Err(Error::dim("sparse_taps", "row count must equal output plane size"));
        }
        let in_plane = in_hw.0 * in_hw.1;
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut index = Vec::new();
        let mut weight = Vec::new();
        offsets.push(0);
        for row in rows {
            for &(i, w) in row {
                if i >= in_plane {
                    return Err(Error::dim("sparse_taps", format!("tap {i} outside input plane")));
                }
                index.push(i as u32);
                weight.push(w);
            }
            offsets.push(index.len());
        }
        Ok(Self {
            in_hw,
            out_hw,
            offsets,
            index,
            weight,
        })
    }

    pub fn in_hw(&self) -> (usize, usize) {
        self.in_hw
    }

    pub fn out_hw(&self) -> (usize, usize) {
        self.out_hw
    }

    /// Taps feeding output pixel `o`.
    pub fn taps(&self, o: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[o], self.offsets[o + 1]);
        self.index[a..b]
            .iter()
            .zip(&self.weight[a..b])
            .map(|(&i, &w)| (i as usize, w))
    }

    /// Applies the map to a `C×H_in×W_in` buffer.
    pub fn apply(&self, input: &[f64], channels: usize) -> Vec<f64> {
        let in_plane = self.in_hw.0 * self.in_hw.1;
        let out_plane = self.out_hw.0 * self.out_hw.1;
        let mut out = vec![0.0; channels * out_plane];
        for c in 0..channels {
            let src = &input[c * in_plane..(c + 1) * in_plane];
            let dst = &mut out[c * out_plane..(c + 1) * out_plane];
            for (o, d) in dst.iter_mut().enumerate() {
                *d = self.taps(o).map(|(i, w)| w * src[i]).sum();
            }
        }
        out
    }

    fn apply_transpose(&self, d_out: &[f64], channels: usize) -> Vec<f64> {
        let in_plane = self.in_hw.0 * self.in_hw.1;
        let out_plane = self.out_hw.0 * self.out_hw.1;
        let mut d_in = vec![0.0; channels * in_plane];
        for c in 0..channels {
            let g = &d_out[c * out_plane..(c + 1) * out_plane];
            let dst = &mut d_in[c * in_plane..(c + 1) * in_plane];
            for (o, &gv) in g.iter().enumerate() {
                for (i, w) in self.taps(o) {
                    dst[i] += w * gv;
                }
            }
        }
        d_in
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Square(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Relu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    FrobeniusSq(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    L2NormalizeRows(NodeId),
    L1NormalizeRows(NodeId),
    GatherRows(NodeId, Arc<[usize]>),
    ConcatRows(Vec<NodeId>),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Resample(NodeId, Arc<SparseTaps>),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(a, _) | Square(a) | Log(a) | Exp(a) | Relu(a) | Sum(a) | Mean(a) | FrobeniusSq(a)
            | Transpose(a) | Reshape(a) | SoftmaxRows(a) | LogSoftmaxRows(a) | L2NormalizeRows(a)
            | L1NormalizeRows(a) | GatherRows(a, _) | Resample(a, _) => vec![*a],
            ConcatRows(parts) => parts.clone(),
            Conv2d { input, weight, bias } => vec![*input, *weight, *bias],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only computation tape. Node `i` only references nodes `< i`, so
/// insertion order is a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn rows_cols(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a differentiable leaf (a trainable parameter).
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, true)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Copies a node's value into a fresh constant leaf (stop-gradient).
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.constant(v)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Direct inputs of a node (empty for leaves).
    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    /// Accumulated gradient of a leaf, if any was propagated to it.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        let node = &self.nodes[id.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad matches value shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        let data: Vec<f64> = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if vb.is_scalar() {
            let y = vb.item();
            va.data().iter().map(|&x| f(x, y)).collect()
        } else if va.is_scalar() {
            let x = va.item();
            vb.data().iter().map(|&y| f(x, y)).collect()
        } else {
            return Err(Error::dim(
                name,
                format!("{:?} vs {:?} (only scalar broadcasting)", va.shape(), vb.shape()),
            ));
        };
        let shape = if va.shape() == vb.shape() || vb.is_scalar() {
            va.shape().to_vec()
        } else {
            vb.shape().to_vec()
        };
        Tensor::new(&shape, data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), v, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b), v, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), v, "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.map(a, |x| x * c);
        self.push(Op::Scale(a, c), v, "scale")
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.map(a, |x| x * x);
        self.push(Op::Square(a), v, "square")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {x}"),
            });
        }
        let v = self.map(a, f64::ln);
        self.push(Op::Log(a), v, "log")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.map(a, f64::exp);
        self.push(Op::Exp(a), v, "exp")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.map(a, |x| x.max(0.0));
        self.push(Op::Relu(a), v, "relu")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s), "mean")
    }

    /// Sum of squared entries.
    pub fn frobenius_sq(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.push(Op::FrobeniusSq(a), Tensor::scalar(s), "frobenius_sq")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = rows_cols(self.value(a), "matmul")?;
        let (k2, p) = rows_cols(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}x{k}] · [{k2}x{p}]")));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, p);
        let v = Tensor::new(&[m, p], data)?;
        self.push(Op::MatMul(a, b), v, "matmul")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = rows_cols(self.value(a), "transpose")?;
        let v = Tensor::new(&[c, r], kernels::transpose(self.value(a).data(), r, c))?;
        self.push(Op::Transpose(a), v, "transpose")
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).clone().reshaped(shape)?;
        self.push(Op::Reshape(a), v, "reshape")
    }

    /// Row-wise softmax, stabilized by subtracting each row's max.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, c) = rows_cols(self.value(a), "softmax_rows")?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let v = Tensor::new(self.shape(a), out)?;
        self.push(Op::SoftmaxRows(a), v, "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, c) = rows_cols(self.value(a), "log_softmax_rows")?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let v = Tensor::new(self.shape(a), out)?;
        self.push(Op::LogSoftmaxRows(a), v, "log_softmax_rows")
    }

    /// Divides each row by `max(‖row‖₂, 1e-12)`.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, c) = rows_cols(self.value(a), "l2_normalize_rows")?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            row.iter_mut().for_each(|x| *x /= n);
        }
        let v = Tensor::new(self.shape(a), out)?;
        self.push(Op::L2NormalizeRows(a), v, "l2_normalize_rows")
    }

    /// Divides each row by `max(Σ row, 1e-12)`; meant for non-negative rows.
    pub fn l1_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, c) = rows_cols(self.value(a), "l1_normalize_rows")?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let s = row.iter().sum::<f64>().max(NORM_EPS);
            row.iter_mut().for_each(|x| *x /= s);
        }
        let v = Tensor::new(self.shape(a), out)?;
        self.push(Op::L1NormalizeRows(a), v, "l1_normalize_rows")
    }

    /// Selects rows (repeats allowed) of a matrix.
    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (r, c) = rows_cols(self.value(a), "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::dim("gather_rows", "no rows requested"));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::dim("gather_rows", format!("row {i} of {r}")));
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let v = Tensor::new(&[rows.len(), c], out)?;
        self.push(Op::GatherRows(a, rows.into()), v, "gather_rows")
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat_rows", "nothing to concatenate"))?;
        let (_, c) = rows_cols(self.value(first), "concat_rows")?;
        let mut total = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c2) = rows_cols(self.value(p), "concat_rows")?;
            if c2 != c {
                return Err(Error::dim("concat_rows", format!("{c2} columns vs {c}")));
            }
            total += r;
            out.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(&[total, c], out)?;
        self.push(Op::ConcatRows(parts.to_vec()), v, "concat_rows")
    }

    /// Stride-1 convolution with zero "same" padding.
    ///
    /// `input: C_in×H×W`, `weight: C_out×C_in×k×k` (odd k), `bias: C_out`.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let dims = self.conv_dims(input, weight, bias)?;
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            dims,
        );
        let v = Tensor::new(&[dims.c_out, dims.h, dims.w], out)?;
        self.push(Op::Conv2d { input, weight, bias }, v, "conv2d")
    }

    fn conv_dims(&self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<ConvDims> {
        let (&[c_in, h, w], &[c_out, c_in2, k, k2]) = (self.shape(input), self.shape(weight)) else {
            return Err(Error::dim(
                "conv2d",
                format!("input {:?}, weight {:?}", self.shape(input), self.shape(weight)),
            ));
        };
        if c_in != c_in2 || k != k2 || k % 2 == 0 || self.value(bias).numel() != c_out {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    self.shape(input),
                    self.shape(weight),
                    self.shape(bias)
                ),
            ));
        }
        Ok(ConvDims { c_in, c_out, h, w, k })
    }

    /// Applies a fixed sparse map to each channel of a `C×H×W` tensor.
    /// Gradients flow to the input only.
    pub fn resample(&mut self, input: NodeId, taps: Arc<SparseTaps>) -> Result<NodeId> {
        let &[c, h, w] = self.shape(input) else {
            return Err(Error::dim("resample", format!("expected C×H×W, got {:?}", self.shape(input))));
        };
        if (h, w) != taps.in_hw() {
            return Err(Error::dim(
                "resample",
                format!("input plane {h}x{w} vs taps {:?}", taps.in_hw()),
            ));
        }
        let (ho, wo) = taps.out_hw();
        let v = Tensor::new(&[c, ho, wo], taps.apply(self.value(input).data(), c))?;
        self.push(Op::Resample(input, taps), v, "resample")
    }

    fn map(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    /// Reverse sweep from a scalar loss; leaf gradients accumulate with `+=`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (input, contrib) in self.local_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match grads[input.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    None => grads[input.0] = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        // Reduces a broadcast gradient back onto a scalar operand.
        let fit = |id: NodeId, full: Vec<f64>| -> Vec<f64> {
            if self.nodes[id.0].value.numel() == full.len() {
                full
            } else {
                vec![full.iter().sum()]
            }
        };
        let bcast = |id: NodeId, k: usize| -> f64 {
            let d = val(id);
            if d.len() == 1 {
                d[0]
            } else {
                d[k]
            }
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, fit(*a, g.to_vec())), (*b, fit(*b, g.to_vec()))],
            Op::Sub(a, b) => vec![
                (*a, fit(*a, g.to_vec())),
                (*b, fit(*b, g.iter().map(|x| -x).collect())),
            ],
            Op::Mul(a, b) => {
                let mut res = Vec::new();
                if wants(*a) {
                    let full = g.iter().enumerate().map(|(k, gv)| gv * bcast(*b, k)).collect();
                    res.push((*a, fit(*a, full)));
                }
                if wants(*b) {
                    let full = g.iter().enumerate().map(|(k, gv)| gv * bcast(*a, k)).collect();
                    res.push((*b, fit(*b, full)));
                }
                res
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::Square(a) => vec![(*a, g.iter().zip(val(*a)).map(|(gv, x)| 2.0 * x * gv).collect())],
            Op::Log(a) => vec![(*a, g.iter().zip(val(*a)).map(|(gv, x)| gv / x).collect())],
            Op::Exp(a) => vec![(*a, g.iter().zip(out).map(|(gv, y)| gv * y).collect())],
            Op::Relu(a) => vec![(
                *a,
                g.iter().zip(val(*a)).map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 }).collect(),
            )],
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::FrobeniusSq(a) => vec![(*a, val(*a).iter().map(|x| 2.0 * x * g[0]).collect())],
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k, p) = (sa[0], sa[1], sb[1]);
                let mut res = Vec::new();
                if wants(*a) {
                    res.push((*a, kernels::matmul_nt(g, val(*b), m, p, k)));
                }
                if wants(*b) {
                    res.push((*b, kernels::matmul_tn(val(*a), g, m, k, p)));
                }
                res
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                vec![(*a, kernels::transpose(g, s[0], s[1]))]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::SoftmaxRows(a) => {
                let c = node.value.shape()[1];
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), yr) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(out.chunks_exact(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = yv * (gv - dot);
                    }
                }
                vec![(*a, d)]
            }
            Op::LogSoftmaxRows(a) => {
                let c = node.value.shape()[1];
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), yr) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(out.chunks_exact(c)) {
                    let gs: f64 = gr.iter().sum();
                    for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = gv - yv.exp() * gs;
                    }
                }
                vec![(*a, d)]
            }
            Op::L2NormalizeRows(a) => {
                let c = node.value.shape()[1];
                let x = val(*a);
                let mut d = vec![0.0; g.len()];
                for (((dr, gr), yr), xr) in d
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(out.chunks_exact(c))
                    .zip(x.chunks_exact(c))
                {
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > NORM_EPS {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv = (gv - yv * dot) / n;
                        }
                    } else {
                        for (dv, gv) in dr.iter_mut().zip(gr) {
                            *dv = gv / NORM_EPS;
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::L1NormalizeRows(a) => {
                let c = node.value.shape()[1];
                let x = val(*a);
                let mut d = vec![0.0; g.len()];
                for (((dr, gr), yr), xr) in d
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(out.chunks_exact(c))
                    .zip(x.chunks_exact(c))
                {
                    let s: f64 = xr.iter().sum();
                    if s > NORM_EPS {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (dv, gv) in dr.iter_mut().zip(gr) {
                            *dv = (gv - dot) / s;
                        }
                    } else {
                        for (dv, gv) in dr.iter_mut().zip(gr) {
                            *dv = gv / NORM_EPS;
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::GatherRows(a, rows) => {
                let c = node.value.shape()[1];
                let mut d = vec![0.0; val(*a).len()];
                for (gr, &r) in g.chunks_exact(c).zip(rows.iter()) {
                    for (dv, gv) in d[r * c..(r + 1) * c].iter_mut().zip(gr) {
                        *dv += gv;
                    }
                }
                vec![(*a, d)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = val(p).len();
                        let piece = g[offset..offset + n].to_vec();
                        offset += n;
                        (p, piece)
                    })
                    .collect()
            }
            Op::Conv2d { input, weight, bias } => {
                let dims = self.conv_dims(*input, *weight, *bias).expect("validated in forward");
                let (di, dw, db) = kernels::conv2d_backward(
                    val(*input),
                    val(*weight),
                    g,
                    dims,
                    wants(*input),
                    wants(*weight),
                    wants(*bias),
                );
                [(*input, di), (*weight, dw), (*bias, db)]
                    .into_iter()
                    .filter_map(|(id, d)| d.map(|d| (id, d)))
                    .collect()
            }
            Op::Resample(a, taps) => {
                let c = node.value.shape()[0];
                vec![(*a, taps.apply_transpose(g, c))]
            }
        }
    }
}
