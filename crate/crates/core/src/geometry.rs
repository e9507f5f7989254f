//! Invertible affine augmentation through sampling grids.
//!
//! A transform maps normalized *output* coordinates to normalized *input*
//! coordinates (`x, y ∈ [-1, 1]`, pixel centers at `(2j + 1)/W − 1`). Warping
//! an image by `t` and then resampling the result with `invert(t)` lands every
//! pixel back on its original location, which is how feature maps of an
//! augmented view are brought into the canonical (un-augmented) frame in O(H·W).

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, SparseTaps, Tensor};

/// Minimum `|det|` of the linear part for a transform to count as invertible.
pub const MIN_DET: f64 = 1e-9;

/// Sample positions closer than this to a pixel center snap onto it, so that
/// identity and mirror grids reproduce their input bit-exactly.
const SNAP: f64 = 1e-9;

/// `[[a, b, tx], [c, d, ty]]` acting on column vectors `(x, y, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    m: [[f64; 3]; 2],
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn new(m: [[f64; 3]; 2]) -> Result<Self> {
        let t = Self { m };
        let det = t.det();
        if det.abs() < MIN_DET || !det.is_finite() {
            return Err(Error::Singular { det });
        }
        Ok(t)
    }

    pub fn scale(sx: f64, sy: f64) -> Result<Self> {
        Self::new([[sx, 0.0, 0.0], [0.0, sy, 0.0]])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    pub fn flip_horizontal() -> Self {
        Self {
            m: [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn matrix(&self) -> [[f64; 3]; 2] {
        self.m
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        let (a, b) = (&self.m, &other.m);
        let mut m = [[0.0; 3]; 2];
        for (r, row) in m.iter_mut().enumerate() {
            for c in 0..3 {
                row[c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
            row[2] += a[r][2];
        }
        AffineTransform { m }
    }

    pub fn invert(&self) -> Result<AffineTransform> {
        let det = self.det();
        if det.abs() < MIN_DET || !det.is_finite() {
            return Err(Error::Singular { det });
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(AffineTransform {
            m: [
                [ia, ib, -(ia * tx + ib * ty)],
                [ic, id, -(ic * tx + id * ty)],
            ],
        })
    }

    /// Largest absolute entry-wise difference to `other`.
    pub fn max_abs_diff(&self, other: &AffineTransform) -> f64 {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Normalized coordinate of pixel center `j` on an axis of `n` pixels.
#[inline]
pub fn pixel_center(j: usize, n: usize) -> f64 {
    // Integer numerator keeps mirrored centers exact negatives of each other.
    (2 * j as i64 + 1 - n as i64) as f64 / n as f64
}

/// Continuous pixel index of normalized coordinate `x` (inverse of [`pixel_center`]).
#[inline]
pub fn to_pixel(x: f64, n: usize) -> f64 {
    ((x + 1.0) * n as f64 - 1.0) / 2.0
}

/// Per-pixel source coordinates of a warp, in normalized units.
#[derive(Clone, Debug)]
pub struct SampleGrid {
    h: usize,
    w: usize,
    coords: Vec<[f64; 2]>,
    valid: Vec<bool>,
}

impl SampleGrid {
    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// `(x, y)` source coordinate of output pixel `(i, j)`.
    pub fn coord(&self, i: usize, j: usize) -> [f64; 2] {
        self.coords[i * self.w + j]
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    /// True where the source coordinate lies inside `[-1, 1]²`.
    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// Bilinear taps against an `in_h × in_w` source with zero padding.
    pub fn bilinear_taps(&self, in_h: usize, in_w: usize) -> SparseTaps {
        let rows: Vec<Vec<(usize, f64)>> = self
            .coords
            .iter()
            .map(|&[x, y]| bilinear_row(to_pixel(x, in_w), to_pixel(y, in_h), in_h, in_w))
            .collect();
        SparseTaps::from_rows((in_h, in_w), (self.h, self.w), &rows).expect("taps are in range")
    }
}

fn snap(u: f64) -> f64 {
    let r = u.round();
    if (u - r).abs() < SNAP {
        r
    } else {
        u
    }
}

fn bilinear_row(u: f64, v: f64, h: usize, w: usize) -> Vec<(usize, f64)> {
    let (u, v) = (snap(u), snap(v));
    let (x0, y0) = (u.floor(), v.floor());
    let (fx, fy) = (u - x0, v - y0);
    let mut row = Vec::with_capacity(4);
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let wgt = wx * wy;
            let (xi, yi) = (x0 + dx, y0 + dy);
            if wgt == 0.0 || xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
                continue;
            }
            row.push((yi as usize * w + xi as usize, wgt));
        }
    }
    row
}

/// Source coordinates `t · (x_j, y_i, 1)` for every output pixel; one pass over H·W.
pub fn make_grid(t: &AffineTransform, h: usize, w: usize) -> SampleGrid {
    let mut coords = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = pixel_center(i, h);
        for j in 0..w {
            let (sx, sy) = t.apply(pixel_center(j, w), y);
            coords.push([sx, sy]);
            valid.push((-1.0..=1.0).contains(&sx) && (-1.0..=1.0).contains(&sy));
        }
    }
    SampleGrid { h, w, coords, valid }
}

fn chw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::dim(op, format!("expected C×H×W, got {shape:?}"))),
    }
}

/// Bilinear resampling of a `C×H×W` image at the grid coordinates. Samples
/// outside the source read zeros and are flagged invalid.
pub fn grid_sample(img: &Tensor, grid: &SampleGrid) -> Result<(Tensor, Vec<bool>)> {
    let (c, h, w) = chw(img.shape(), "grid_sample")?;
    let taps = grid.bilinear_taps(h, w);
    let out = Tensor::new(&[c, grid.h, grid.w], taps.apply(img.data(), c))?;
    Ok((out, grid.valid.clone()))
}

/// Differentiable counterpart of [`grid_sample`]; the grid is a constant.
pub fn grid_sample_node(g: &mut Graph, img: NodeId, grid: &SampleGrid) -> Result<(NodeId, Vec<bool>)> {
    let (_, h, w) = chw(g.shape(img), "grid_sample")?;
    let taps = Arc::new(grid.bilinear_taps(h, w));
    Ok((g.resample(img, taps)?, grid.valid.clone()))
}

/// Warps an image into the view defined by `t`.
pub fn warp(img: &Tensor, t: &AffineTransform) -> Result<(Tensor, Vec<bool>)> {
    let (_, h, w) = chw(img.shape(), "warp")?;
    grid_sample(img, &make_grid(t, h, w))
}

/// Canonical-frame pixels observed by a view warped with `t`.
pub fn canonical_coverage(t: &AffineTransform, h: usize, w: usize) -> Result<Vec<bool>> {
    Ok(make_grid(&t.invert()?, h, w).valid)
}

/// Brings a map computed on a view back to the canonical frame.
pub fn align_to_canonical(featmap: &Tensor, t: &AffineTransform) -> Result<(Tensor, Vec<bool>)> {
    let (_, h, w) = chw(featmap.shape(), "align_to_canonical")?;
    grid_sample(featmap, &make_grid(&t.invert()?, h, w))
}

/// Graph version of [`align_to_canonical`]; gradients flow to `featmap`.
pub fn align_to_canonical_node(g: &mut Graph, featmap: NodeId, t: &AffineTransform) -> Result<(NodeId, Vec<bool>)> {
    let (_, h, w) = chw(g.shape(featmap), "align_to_canonical")?;
    let grid = make_grid(&t.invert()?, h, w);
    grid_sample_node(g, featmap, &grid)
}

/// Ranges for image-level view augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewAugConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    /// Largest per-axis shift of one view, in normalized units.
    pub translate_max: f64,
    pub flip_prob: f64,
}

impl Default for ViewAugConfig {
    fn default() -> Self {
        Self {
            scale_min: 0.9,
            scale_max: 1.1,
            translate_max: 0.1,
            flip_prob: 0.5,
        }
    }
}

impl ViewAugConfig {
    pub fn identity() -> Self {
        Self {
            scale_min: 1.0,
            scale_max: 1.0,
            translate_max: 0.0,
            flip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && self.translate_max >= 0.0
            && (0.0..=1.0).contains(&self.flip_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid view augmentation ranges: {self:?}")))
        }
    }
}

/// Uniform scale, random-sign translation and optional horizontal flip.
pub fn random_view_transform<R: Rng + ?Sized>(rng: &mut R, cfg: &ViewAugConfig) -> AffineTransform {
    let s = if cfg.scale_max > cfg.scale_min {
        rng.random_range(cfg.scale_min..=cfg.scale_max)
    } else {
        cfg.scale_min
    };
    let mut shift = || {
        if cfg.translate_max > 0.0 {
            let mag = rng.random_range(0.0..=cfg.translate_max);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        } else {
            0.0
        }
    };
    let (tx, ty) = (shift(), shift());
    let flip = cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob);
    let sx = if flip { -s } else { s };
    AffineTransform {
        m: [[sx, 0.0, tx], [0.0, s, ty]],
    }
}
