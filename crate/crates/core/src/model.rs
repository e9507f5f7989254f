//! Small fully-convolutional segmentation network, EMA teacher, pseudo
//! labels and checkpoint files.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::ViewPair;
use crate::error::{Error, Result};
use crate::geometry::align_to_canonical;
use crate::sampler::hard_labels;
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub width: usize,
    /// Number of 3×3 conv + ReLU layers before the head.
    pub depth: usize,
    pub kernel: usize,
    pub classes: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            width: 8,
            depth: 3,
            kernel: 3,
            classes: 4,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.in_channels > 0 && self.width > 0 && self.classes >= 2 && self.kernel % 2 == 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid network config: {self:?}")))
        }
    }

    /// `(name, shape)` of every parameter in declaration order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = self.in_channels;
        for i in 0..self.depth {
            out.push((format!("conv{i}.weight"), vec![self.width, c_in, self.kernel, self.kernel]));
            out.push((format!("conv{i}.bias"), vec![self.width]));
            c_in = self.width;
        }
        out.push(("head.weight".into(), vec![self.classes, c_in, 1, 1]));
        out.push(("head.bias".into(), vec![self.classes]));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    cfg: SegNetConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl SegNet {
    pub fn zeros(cfg: SegNetConfig) -> Result<Self> {
        cfg.validate()?;
        let (names, params) = cfg.layout().into_iter().map(|(n, s)| (n, Tensor::zeros(&s))).unzip();
        Ok(Self { cfg, names, params })
    }

    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: SegNetConfig, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(cfg)?;
        for (name, p) in net.names.iter().zip(net.params.iter_mut()) {
            if name.ends_with(".bias") {
                continue;
            }
            let fan_in: usize = p.shape()[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            p.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
        }
        Ok(net)
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.cfg
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Whether parameter `i` belongs to the feature extractor (everything
    /// except the class head).
    pub fn is_feature_extractor(&self, i: usize) -> bool {
        !self.names[i].starts_with("head.")
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Adds the parameters to `g` as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        self.params.iter().map(|p| g.leaf(p.clone(), trainable)).collect()
    }

    /// Logits `C×H×W` for an image node, using already bound parameters.
    pub fn forward_node(&self, g: &mut Graph, params: &[NodeId], img: NodeId) -> Result<NodeId> {
        let shape = g.shape(img);
        if shape.len() != 3 || shape[0] != self.cfg.in_channels {
            return Err(Error::dim(
                "segnet forward",
                format!("expected {}×H×W input, got {shape:?}", self.cfg.in_channels),
            ));
        }
        let mut x = img;
        for layer in 0..self.cfg.depth {
            let y = g.conv2d(x, params[2 * layer], params[2 * layer + 1])?;
            x = g.relu(y)?;
        }
        let d = self.cfg.depth;
        g.conv2d(x, params[2 * d], params[2 * d + 1])
    }

    /// Gradient-free forward pass.
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(img.clone());
        let y = self.forward_node(&mut g, &params, x)?;
        Ok(g.value(y).clone())
    }

    /// Per-pixel argmax of the logits.
    pub fn predict(&self, img: &Tensor) -> Result<Vec<u8>> {
        let logits = self.forward(img)?;
        let rows = channels_last(&logits);
        Ok(hard_labels(&rows, self.cfg.classes).into_iter().map(|c| c as u8).collect())
    }

    fn check_compatible(&self, other: &SegNet) -> Result<()> {
        if self.cfg != other.cfg {
            return Err(Error::dim("segnet", format!("{:?} vs {:?}", self.cfg, other.cfg)));
        }
        Ok(())
    }
}

/// `C×H×W` to a flat `(H·W)×C` buffer.
pub fn channels_last(map: &Tensor) -> Vec<f64> {
    let (c, plane) = (map.shape()[0], map.numel() / map.shape()[0]);
    let mut out = vec![0.0; map.numel()];
    for ch in 0..c {
        for p in 0..plane {
            out[p * c + ch] = map.data()[ch * plane + p];
        }
    }
    out
}

/// Flat `(H·W)×C` rows back to `C×H×W`.
pub fn channels_first(rows: &[f64], c: usize, h: usize, w: usize) -> Result<Tensor> {
    let plane = h * w;
    let mut out = vec![0.0; rows.len()];
    for p in 0..plane {
        for ch in 0..c {
            out[ch * plane + p] = rows[p * c + ch];
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Softmax over the channel axis of a `C×H×W` map.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let (c, plane) = (logits.shape()[0], logits.numel() / logits.shape()[0]);
    let d = logits.data();
    let mut out = vec![0.0; d.len()];
    for p in 0..plane {
        let m = (0..c).map(|ch| d[ch * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|ch| (d[ch * plane + p] - m).exp()).sum();
        for ch in 0..c {
            out[ch * plane + p] = (d[ch * plane + p] - m).exp() / z;
        }
    }
    Tensor::new(logits.shape(), out).expect("same shape")
}

/// Rescales each pixel's class vector to sum one; all-zero pixels stay zero.
pub fn renormalize_channels(map: &mut Tensor) {
    let (c, plane) = (map.shape()[0], map.numel() / map.shape()[0]);
    let d = map.data_mut();
    for p in 0..plane {
        let s: f64 = (0..c).map(|ch| d[ch * plane + p]).sum();
        if s > 1e-12 {
            (0..c).for_each(|ch| d[ch * plane + p] /= s);
        }
    }
}

/// Exponential moving average copy of a student network.
#[derive(Clone, Debug)]
pub struct EmaTeacher {
    pub net: SegNet,
    pub momentum: f64,
}

impl EmaTeacher {
    pub fn from_student(student: &SegNet, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("EMA momentum {momentum} outside [0, 1]")));
        }
        Ok(Self {
            net: student.clone(),
            momentum,
        })
    }

    /// `θ̄ ← m·θ̄ + (1 − m)·θ`.
    pub fn update(&mut self, student: &SegNet) -> Result<()> {
        ema_update(&mut self.net, student, self.momentum)
    }
}

pub fn ema_update(teacher: &mut SegNet, student: &SegNet, m: f64) -> Result<()> {
    teacher.check_compatible(student)?;
    for (t, s) in teacher.params.iter_mut().zip(&student.params) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

/// Teacher predictions for one view pair in the canonical frame.
#[derive(Clone, Debug)]
pub struct PseudoLabel {
    /// Average of the two aligned, renormalized teacher softmax maps.
    pub y_hat: Tensor,
    /// Each view's aligned, renormalized teacher softmax map.
    pub aligned: [Tensor; 2],
    pub valid: Vec<bool>,
}

/// Runs the teacher on both views, aligns each softmax map to the canonical
/// frame, renormalizes and averages. The result is plain data and carries no
/// graph edges.
pub fn pseudo_label(teacher: &SegNet, pair: &ViewPair) -> Result<PseudoLabel> {
    if !pair.valid.iter().any(|&v| v) {
        return Err(Error::Empty("view pair has an empty validity mask"));
    }
    let mut aligned = Vec::with_capacity(2);
    for (view, t) in pair.views().into_iter().zip(pair.transforms()) {
        let probs = softmax_channels(&teacher.forward(view)?);
        let (mut back, _) = align_to_canonical(&probs, t)?;
        renormalize_channels(&mut back);
        aligned.push(back);
    }
    let y_hat = Tensor::new(
        aligned[0].shape(),
        aligned[0].data().iter().zip(aligned[1].data()).map(|(a, b)| 0.5 * (a + b)).collect(),
    )?;
    let second = aligned.pop().expect("two views");
    let first = aligned.pop().expect("two views");
    Ok(PseudoLabel {
        y_hat,
        aligned: [first, second],
        valid: pair.valid.clone(),
    })
}

/// Margin by which a flipped soft label favors its new class.
pub const FLIP_MARGIN: f64 = 0.02;

/// Smallest change to a probability row that makes `new_class` its argmax by
/// `margin`. Mass moves only from the current argmax to `new_class`.
pub fn flip_soft_label(row: &mut [f64], new_class: usize, margin: f64) {
    let old = hard_labels(row, row.len())[0];
    if old == new_class {
        return;
    }
    let other = row
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != old && c != new_class)
        .map(|(_, &v)| v)
        .fold(0.0, f64::max);
    let need = ((row[old] - row[new_class] + margin) / 2.0).max(other + margin - row[new_class]);
    let delta = need.clamp(0.0, row[old]);
    row[old] -= delta;
    row[new_class] += delta;
}

/// Flips each pixel's hard class to a uniformly drawn other class with
/// probability `eta`, and applies [`flip_soft_label`] to the matching row of
/// `soft` (`M×C`). Returns the flipped pixel indices.
pub fn inject_label_noise<R: Rng + ?Sized>(
    hard: &mut [usize],
    soft: &mut [f64],
    classes: usize,
    eta: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("noise rate {eta} outside [0, 1]")));
    }
    if soft.len() != hard.len() * classes {
        return Err(Error::dim("inject_label_noise", "soft rows do not match hard labels"));
    }
    let mut flipped = Vec::new();
    if eta == 0.0 {
        return Ok(flipped);
    }
    for (i, h) in hard.iter_mut().enumerate() {
        if !rng.random_bool(eta) {
            continue;
        }
        let mut k = rng.random_range(0..classes - 1);
        if k >= *h {
            k += 1;
        }
        *h = k;
        flip_soft_label(&mut soft[i * classes..(i + 1) * classes], k, FLIP_MARGIN);
        flipped.push(i);
    }
    Ok(flipped)
}

const MAGIC: &str = "mvcc-segnet v1";

/// Writes a text header (architecture and one `name dims…` line per tensor)
/// followed by little-endian f64 values in declaration order.
pub fn save_checkpoint(net: &SegNet, path: &Path) -> Result<()> {
    let c = net.cfg;
    let mut buf = format!(
        "{MAGIC}\narch in={} width={} depth={} kernel={} classes={}\n",
        c.in_channels, c.width, c.depth, c.kernel, c.classes
    );
    for (name, p) in net.names.iter().zip(&net.params) {
        let dims: Vec<String> = p.shape().iter().map(usize::to_string).collect();
        buf.push_str(&format!("param {name} {}\n", dims.join(" ")));
    }
    buf.push_str("end\n");
    let mut bytes = buf.into_bytes();
    for p in &net.params {
        for v in p.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<SegNet> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<fs::File>| -> Result<String> {
        line.clear();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut r)? != MAGIC {
        return Err(Error::parse(path, "missing checkpoint magic line"));
    }
    let arch = next_line(&mut r)?;
    let mut cfg = SegNetConfig::default();
    let mut fields = arch.split_whitespace();
    if fields.next() != Some("arch") {
        return Err(Error::parse(path, "missing arch line"));
    }
    for kv in fields {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::parse(path, format!("bad arch field {kv}")))?;
        let v: usize = v.parse().map_err(|_| Error::parse(path, format!("bad arch value {kv}")))?;
        match k {
            "in" => cfg.in_channels = v,
            "width" => cfg.width = v,
            "depth" => cfg.depth = v,
            "kernel" => cfg.kernel = v,
            "classes" => cfg.classes = v,
            _ => return Err(Error::parse(path, format!("unknown arch field {k}"))),
        }
    }
    let mut net = SegNet::zeros(cfg)?;
    let expected = cfg.layout();
    let mut declared = Vec::new();
    loop {
        let l = next_line(&mut r)?;
        if l == "end" {
            break;
        }
        let mut it = l.split_whitespace();
        if it.next() != Some("param") {
            return Err(Error::parse(path, format!("unexpected header line {l:?}")));
        }
        let name = it.next().ok_or_else(|| Error::parse(path, "param line without name"))?.to_string();
        let dims = it
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::parse(path, format!("bad dims in {l:?}")))?;
        declared.push((name, dims));
    }
    if declared != expected {
        return Err(Error::parse(path, "parameter list does not match the architecture"));
    }
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.len() != net.num_scalars() * 8 {
        return Err(Error::parse(
            path,
            format!("expected {} payload bytes, found {}", net.num_scalars() * 8, raw.len()),
        ));
    }
    let mut values = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
    for p in net.params.iter_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = values.next().expect("length checked"));
    }
    Ok(net)
}
