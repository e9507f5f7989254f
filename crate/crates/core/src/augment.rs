//! Two-view construction for unlabeled images and region-level CutMix.
//!
//! Boxes for the coherent variant live in canonical pixel coordinates. A view
//! pixel belongs to the box when its canonical source coordinate rounds to a
//! pixel inside it, and its new value is read from the donor's matching view
//! through the composed transform `t_donor⁻¹ ∘ t`. That is the same as
//! aligning to canonical, pasting and re-warping, but it resamples only once
//! and leaves pixels outside the box untouched.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    canonical_coverage, grid_sample, make_grid, random_view_transform, to_pixel, AffineTransform, ViewAugConfig,
};
use crate::tensor::Tensor;

/// Photometric jitter ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct JitterConfig {
    /// Largest additive brightness offset.
    pub brightness: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast_min: 0.8,
            contrast_max: 1.25,
        }
    }
}

impl JitterConfig {
    pub fn off() -> Self {
        Self {
            brightness: 0.0,
            contrast_min: 1.0,
            contrast_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.brightness >= 0.0 && self.contrast_min > 0.0 && self.contrast_min <= self.contrast_max {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid color jitter ranges: {self:?}")))
        }
    }
}

/// One drawn jitter: `clamp(contrast·(x − μ) + μ + brightness, 0, 1)` with
/// `μ` the mean over all channels of the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        brightness: 0.0,
        contrast: 1.0,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, cfg: &JitterConfig) -> Self {
        let brightness = if cfg.brightness > 0.0 {
            rng.random_range(-cfg.brightness..=cfg.brightness)
        } else {
            0.0
        };
        let contrast = if cfg.contrast_max > cfg.contrast_min {
            rng.random_range(cfg.contrast_min..=cfg.contrast_max)
        } else {
            cfg.contrast_min
        };
        Self { brightness, contrast }
    }

    pub fn apply(&self, img: &Tensor) -> Tensor {
        if *self == Self::NONE {
            return img.clone();
        }
        let mean = img.data().iter().sum::<f64>() / img.numel() as f64;
        let mut out = img.clone();
        for v in out.data_mut() {
            *v = (self.contrast * (*v - mean) + mean + self.brightness).clamp(0.0, 1.0);
        }
        out
    }
}

/// Draws a jitter and applies it.
pub fn color_jitter<R: Rng + ?Sized>(img: &Tensor, rng: &mut R, cfg: &JitterConfig) -> (Tensor, Jitter) {
    let j = Jitter::sample(rng, cfg);
    (j.apply(img), j)
}

/// CutMix box law and application probability.
#[derive(Clone, Debug, PartialEq)]
pub struct CutMixConfig {
    pub prob: f64,
    pub area_min: f64,
    pub area_max: f64,
    /// Height over width.
    pub aspect_min: f64,
    pub aspect_max: f64,
}

impl Default for CutMixConfig {
    fn default() -> Self {
        Self {
            prob: 1.0,
            area_min: 0.2,
            area_max: 0.5,
            aspect_min: 0.5,
            aspect_max: 2.0,
        }
    }
}

impl CutMixConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.prob)
            && 0.0 <= self.area_min
            && self.area_min <= self.area_max
            && 0.0 < self.aspect_min
            && self.aspect_min <= self.aspect_max;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid cutmix ranges: {self:?}")))
        }
    }
}

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CutBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl CutBox {
    pub const EMPTY: CutBox = CutBox { y0: 0, x0: 0, y1: 0, x1: 0 };

    pub fn full(h: usize, w: usize) -> Self {
        Self { y0: 0, x0: 0, y1: h, x1: w }
    }

    pub fn is_empty(&self) -> bool {
        self.y1 <= self.y0 || self.x1 <= self.x0
    }

    pub fn area(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            (self.y1 - self.y0) * (self.x1 - self.x0)
        }
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.y0..self.y1).contains(&i) && (self.x0..self.x1).contains(&j)
    }

    /// Whether a continuous pixel position `(u, v)` rounds into the box.
    pub fn contains_point(&self, u: f64, v: f64) -> bool {
        let (j, i) = ((u + 0.5).floor(), (v + 0.5).floor());
        i >= self.y0 as f64 && i < self.y1 as f64 && j >= self.x0 as f64 && j < self.x1 as f64
    }
}

/// Draws a box with area fraction uniform in `[area_min, area_max]` and
/// aspect uniform in `[aspect_min, aspect_max]`, rounded and clamped into
/// the frame. Fractions ≥ 1 give the whole frame and 0 gives an empty box.
pub fn sample_cutmix_box<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, cfg: &CutMixConfig) -> CutBox {
    let frac = if cfg.area_max > cfg.area_min {
        rng.random_range(cfg.area_min..=cfg.area_max)
    } else {
        cfg.area_min
    };
    let aspect = if cfg.aspect_max > cfg.aspect_min {
        rng.random_range(cfg.aspect_min..=cfg.aspect_max)
    } else {
        cfg.aspect_min
    };
    if frac >= 1.0 {
        return CutBox::full(h, w);
    }
    let area = frac * (h * w) as f64;
    let bh = ((area * aspect).sqrt().round() as usize).min(h);
    let bw = ((area / aspect).sqrt().round() as usize).min(w);
    if bh == 0 || bw == 0 {
        return CutBox::EMPTY;
    }
    let y0 = rng.random_range(0..=h - bh);
    let x0 = rng.random_range(0..=w - bw);
    CutBox {
        y0,
        x0,
        y1: y0 + bh,
        x1: x0 + bw,
    }
}

/// Which boxes were pasted and where the content came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutMixRecord {
    /// Box of view 1. For the coherent variant it is the shared canonical box.
    pub region: CutBox,
    /// Box of view 2; equals `region` for the coherent variant.
    pub region_prime: CutBox,
    pub donor_index: usize,
    /// True when `region` is in canonical coordinates and shared by both views.
    pub coherent: bool,
}

/// Augmentation settings for one unlabeled image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentConfig {
    pub view: ViewAugConfig,
    pub jitter: JitterConfig,
    pub cutmix: CutMixConfig,
    /// Reuse the first view's transform for the second view.
    pub same_geometry: bool,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        self.view.validate()?;
        self.jitter.validate()?;
        self.cutmix.validate()
    }
}

/// Two augmented views of one unlabeled image.
#[derive(Clone, Debug)]
pub struct ViewPair {
    pub x: Tensor,
    pub x_prime: Tensor,
    pub t: AffineTransform,
    pub t_prime: AffineTransform,
    /// Canonical pixels observed by both views.
    pub valid: Vec<bool>,
    pub jitter: [Jitter; 2],
    pub cutmix: Option<CutMixRecord>,
}

impl ViewPair {
    /// Builds a pair from known transforms and jitters.
    pub fn from_parts(img: &Tensor, t: AffineTransform, t_prime: AffineTransform, jitter: [Jitter; 2]) -> Result<Self> {
        let (_, h, w) = chw(img.shape())?;
        let x = jitter[0].apply(&grid_sample(img, &make_grid(&t, h, w))?.0);
        let x_prime = jitter[1].apply(&grid_sample(img, &make_grid(&t_prime, h, w))?.0);
        let valid: Vec<bool> = canonical_coverage(&t, h, w)?
            .into_iter()
            .zip(canonical_coverage(&t_prime, h, w)?)
            .map(|(a, b)| a && b)
            .collect();
        if !valid.iter().any(|&v| v) {
            return Err(Error::Empty("views share no canonical pixel"));
        }
        Ok(Self {
            x,
            x_prime,
            t,
            t_prime,
            valid,
            jitter,
            cutmix: None,
        })
    }

    pub fn transforms(&self) -> [&AffineTransform; 2] {
        [&self.t, &self.t_prime]
    }

    pub fn views(&self) -> [&Tensor; 2] {
        [&self.x, &self.x_prime]
    }
}

fn chw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::dim("augment", format!("expected C×H×W, got {shape:?}"))),
    }
}

/// Draws two independent view transforms and jitters for `img`.
pub fn make_view_pair<R: Rng + ?Sized>(img: &Tensor, rng: &mut R, cfg: &AugmentConfig) -> Result<ViewPair> {
    let t = random_view_transform(rng, &cfg.view);
    let t_prime = if cfg.same_geometry {
        t
    } else {
        random_view_transform(rng, &cfg.view)
    };
    let jitter = [Jitter::sample(rng, &cfg.jitter), Jitter::sample(rng, &cfg.jitter)];
    ViewPair::from_parts(img, t, t_prime, jitter)
}

/// Pastes `donor`'s content into `view` wherever the canonical coordinate of
/// a view pixel (through `t`) falls in the canonical `region`.
fn paste_canonical(
    view: &Tensor,
    t: &AffineTransform,
    donor: &Tensor,
    t_donor: &AffineTransform,
    region: &CutBox,
) -> Result<Tensor> {
    let (c, h, w) = chw(view.shape())?;
    let canon = make_grid(t, h, w);
    let to_donor = t_donor.invert()?.compose(t);
    let (donor_vals, _) = grid_sample(donor, &make_grid(&to_donor, h, w))?;
    let mut out = view.clone();
    let plane = h * w;
    for (p, &[x, y]) in canon.coords().iter().enumerate() {
        if canon.valid()[p] && region.contains_point(to_pixel(x, w), to_pixel(y, h)) {
            for ch in 0..c {
                out.data_mut()[ch * plane + p] = donor_vals.data()[ch * plane + p];
            }
        }
    }
    Ok(out)
}

/// Mixes `pair_a` with content from `pair_b` inside one canonical box shared
/// by both views. The pseudo-label map has to be mixed with the same box by
/// the caller (see [`mix_canonical`]); the returned pair's `valid` already
/// accounts for the donor's coverage inside the box.
pub fn view_coherent_cutmix(pair_a: &ViewPair, pair_b: &ViewPair, region: CutBox, donor_index: usize) -> Result<ViewPair> {
    if pair_a.x.shape() != pair_b.x.shape() {
        return Err(Error::dim(
            "view_coherent_cutmix",
            format!("{:?} vs {:?}", pair_a.x.shape(), pair_b.x.shape()),
        ));
    }
    let (_, h, w) = chw(pair_a.x.shape())?;
    let mut out = pair_a.clone();
    if !region.is_empty() {
        out.x = paste_canonical(&pair_a.x, &pair_a.t, &pair_b.x, &pair_b.t, &region)?;
        out.x_prime = paste_canonical(&pair_a.x_prime, &pair_a.t_prime, &pair_b.x_prime, &pair_b.t_prime, &region)?;
        out.valid = mix_valid(&pair_a.valid, &pair_b.valid, &region, w);
    }
    debug_assert_eq!(out.valid.len(), h * w);
    out.cutmix = Some(CutMixRecord {
        region,
        region_prime: region,
        donor_index,
        coherent: true,
    });
    Ok(out)
}

fn paste_same_frame(view: &Tensor, donor: &Tensor, region: &CutBox) -> Tensor {
    let (h, w) = (view.shape()[1], view.shape()[2]);
    let mut out = view.clone();
    for ch in 0..view.shape()[0] {
        for i in region.y0..region.y1 {
            let row = ch * h * w + i * w;
            out.data_mut()[row + region.x0..row + region.x1].copy_from_slice(&donor.data()[row + region.x0..row + region.x1]);
        }
    }
    out
}

/// Ablation: plain CutMix applied in each view's own frame with independent
/// boxes, so the two views no longer correspond inside the pasted regions.
/// The pseudo-label map is mixed with `region` read as canonical coordinates.
pub fn incoherent_cutmix<R: Rng + ?Sized>(
    pair: &ViewPair,
    other: &ViewPair,
    donor_index: usize,
    rng: &mut R,
    cfg: &CutMixConfig,
) -> Result<ViewPair> {
    if pair.x.shape() != other.x.shape() {
        return Err(Error::dim(
            "incoherent_cutmix",
            format!("{:?} vs {:?}", pair.x.shape(), other.x.shape()),
        ));
    }
    if cfg.prob <= 0.0 || !rng.random_bool(cfg.prob) {
        return Ok(pair.clone());
    }
    let (_, h, w) = chw(pair.x.shape())?;
    let region = sample_cutmix_box(rng, h, w, cfg);
    let region_prime = sample_cutmix_box(rng, h, w, cfg);
    let mut out = pair.clone();
    out.x = paste_same_frame(&pair.x, &other.x, &region);
    out.x_prime = paste_same_frame(&pair.x_prime, &other.x_prime, &region_prime);
    out.valid = mix_valid(&pair.valid, &other.valid, &region, w);
    out.cutmix = Some(CutMixRecord {
        region,
        region_prime,
        donor_index,
        coherent: false,
    });
    Ok(out)
}

/// `valid_a` outside the box, `valid_a ∧ valid_b` inside it.
pub fn mix_valid(valid_a: &[bool], valid_b: &[bool], region: &CutBox, w: usize) -> Vec<bool> {
    valid_a
        .iter()
        .zip(valid_b)
        .enumerate()
        .map(|(p, (&a, &b))| if region.contains(p / w, p % w) { a && b } else { a })
        .collect()
}

/// Replaces the box of a `C×H×W` canonical map with the donor's values.
pub fn mix_canonical(target: &Tensor, donor: &Tensor, region: &CutBox) -> Result<Tensor> {
    if target.shape() != donor.shape() {
        return Err(Error::dim(
            "mix_canonical",
            format!("{:?} vs {:?}", target.shape(), donor.shape()),
        ));
    }
    chw(target.shape())?;
    Ok(paste_same_frame(target, donor, region))
}
