//! Synthetic shape-segmentation data, file formats, labeled splits and mIoU.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Image channels; fixed by the PPM format.
pub const CHANNELS: usize = 3;

/// Generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub count: usize,
    pub eval_count: usize,
    pub size: usize,
    pub classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Half-width of the uniform per-shape color offset around its class color.
    pub color_spread: f64,
    /// Half-width of the uniform per-image gain around 1 applied to all colors.
    pub illumination: f64,
    pub seed: u64,
    pub eval_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 512,
            eval_count: 128,
            size: 48,
            classes: 4,
            min_shapes: 2,
            max_shapes: 5,
            noise: 0.08,
            color_spread: 0.1,
            illumination: 0.0,
            seed: 0,
            eval_seed: 1_000_003,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let problems = [
            (self.count == 0, "count must be positive"),
            (!(32..=96).contains(&self.size), "size must lie in [32, 96]"),
            (!(3..=8).contains(&self.classes), "classes must lie in [3, 8]"),
            (
                self.min_shapes == 0 || self.min_shapes > self.max_shapes,
                "need 1 ≤ min_shapes ≤ max_shapes",
            ),
            (!(self.noise >= 0.0), "noise must be non-negative"),
            (!(0.0..=0.5).contains(&self.color_spread), "color_spread must lie in [0, 0.5]"),
            (!(0.0..1.0).contains(&self.illumination), "illumination must lie in [0, 1)"),
        ];
        match problems.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(Error::Config(msg.to_string())),
            None => Ok(()),
        }
    }

    /// Reads the keys it knows from `kv`, keeping defaults for the rest.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let mut c = Self::default();
        kv.take_into("count", &mut c.count)?;
        kv.take_into("eval_count", &mut c.eval_count)?;
        kv.take_into("size", &mut c.size)?;
        kv.take_into("classes", &mut c.classes)?;
        kv.take_into("min_shapes", &mut c.min_shapes)?;
        kv.take_into("max_shapes", &mut c.max_shapes)?;
        kv.take_into("noise", &mut c.noise)?;
        kv.take_into("color_spread", &mut c.color_spread)?;
        kv.take_into("illumination", &mut c.illumination)?;
        kv.take_into("seed", &mut c.seed)?;
        kv.take_into("eval_seed", &mut c.eval_seed)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv_text(&self) -> String {
        format!(
            "count = {}\neval_count = {}\nsize = {}\nclasses = {}\nmin_shapes = {}\nmax_shapes = {}\nnoise = {}\ncolor_spread = {}\nillumination = {}\nseed = {}\neval_seed = {}\n",
            self.count,
            self.eval_count,
            self.size,
            self.classes,
            self.min_shapes,
            self.max_shapes,
            self.noise,
            self.color_spread,
            self.illumination,
            self.seed,
            self.eval_seed
        )
    }
}

/// Images, label maps and their ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub images: Vec<Tensor>,
    pub labels: Vec<Vec<u8>>,
    pub classes: usize,
    pub size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Pixel count per class over all label maps.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for l in self.labels.iter().flatten() {
            h[*l as usize] += 1;
        }
        h
    }
}

/// Base RGB color of each class, spread around the color wheel at two
/// brightness levels so neighbouring classes stay apart.
pub fn class_colors(classes: usize) -> Vec<[f64; 3]> {
    (0..classes)
        .map(|c| {
            let hue = c as f64 / classes as f64;
            let value = if c % 2 == 0 { 0.75 } else { 0.55 };
            hsv_to_rgb(hue, 0.6, value)
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [f(5.0), f(3.0), f(1.0)]
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { cy: f64, cx: f64, hh: f64, hw: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    /// Parallel bands `|⟨p − c, n⟩| mod period < width` inside a disc.
    Stripes { cy: f64, cx: f64, r: f64, ny: f64, nx: f64, period: f64, width: f64 },
}

impl Shape {
    fn random<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Self {
        let s = size as f64;
        let (cy, cx) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        match rng.random_range(0..3) {
            0 => Shape::Rect {
                cy,
                cx,
                hh: rng.random_range(0.08..0.25) * s,
                hw: rng.random_range(0.08..0.25) * s,
            },
            1 => Shape::Ellipse {
                cy,
                cx,
                ry: rng.random_range(0.08..0.25) * s,
                rx: rng.random_range(0.08..0.25) * s,
            },
            _ => {
                let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let period = rng.random_range(4.0..8.0);
                Shape::Stripes {
                    cy,
                    cx,
                    r: rng.random_range(0.15..0.3) * s,
                    ny: angle.sin(),
                    nx: angle.cos(),
                    period,
                    width: period / 2.0,
                }
            }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { cy, cx, hh, hw } => (y - cy).abs() <= hh && (x - cx).abs() <= hw,
            Shape::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
            Shape::Stripes {
                cy,
                cx,
                r,
                ny,
                nx,
                period,
                width,
            } => {
                let (dy, dx) = (y - cy, x - cx);
                dy * dy + dx * dx <= r * r && (dy * ny + dx * nx).rem_euclid(period) < width
            }
        }
    }
}

/// Rounds to the nearest 8-bit level so stored and in-memory data agree.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn generate_one(cfg: &DataConfig, rng: &mut ChaCha8Rng, colors: &[[f64; 3]]) -> (Tensor, Vec<u8>) {
    let n = cfg.size;
    let mut label = vec![0u8; n * n];
    let mut color = vec![[0.0; 3]; n * n];
    let jitter = |rng: &mut ChaCha8Rng, base: [f64; 3]| {
        base.map(|b| {
            if cfg.color_spread > 0.0 {
                b + rng.random_range(-cfg.color_spread..=cfg.color_spread)
            } else {
                b
            }
        })
    };
    let bg = jitter(rng, colors[0]);
    color.fill(bg);
    let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    for _ in 0..count {
        let class = rng.random_range(1..cfg.classes);
        let shape = Shape::random(rng, n);
        let c = jitter(rng, colors[class]);
        for i in 0..n {
            for j in 0..n {
                if shape.contains(i as f64 + 0.5, j as f64 + 0.5) {
                    label[i * n + j] = class as u8;
                    color[i * n + j] = c;
                }
            }
        }
    }
    let gain = if cfg.illumination > 0.0 {
        rng.random_range(1.0 - cfg.illumination..=1.0 + cfg.illumination)
    } else {
        1.0
    };
    let noise = (cfg.noise > 0.0).then(|| Normal::new(0.0, cfg.noise).expect("positive sigma"));
    let mut data = vec![0.0; CHANNELS * n * n];
    for p in 0..n * n {
        for ch in 0..CHANNELS {
            let e = noise.as_ref().map_or(0.0, |d| d.sample(rng));
            data[ch * n * n + p] = quantize(gain * color[p][ch] + e);
        }
    }
    (Tensor::new(&[CHANNELS, n, n], data).expect("consistent shape"), label)
}

/// Generates `count` images from `seed`; image `k` draws from its own RNG
/// stream so any image can be regenerated independently.
pub fn generate_dataset(cfg: &DataConfig, count: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let colors = class_colors(cfg.classes);
    let mut ds = Dataset {
        ids: Vec::with_capacity(count),
        images: Vec::with_capacity(count),
        labels: Vec::with_capacity(count),
        classes: cfg.classes,
        size: cfg.size,
    };
    for k in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let (img, label) = generate_one(cfg, &mut rng, &colors);
        ds.ids.push(format!("img{k:05}"));
        ds.images.push(img);
        ds.labels.push(label);
    }
    Ok(ds)
}

/// Which ids carry labels for training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<(String, bool)>,
}

impl Manifest {
    pub fn labeled(&self) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].1).collect()
    }

    pub fn unlabeled(&self) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| !self.entries[i].1).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(id, l)| format!("{id}\t{}\n", if *l { "labeled" } else { "unlabeled" }))
            .collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, flag) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, format!("line {}: expected id<TAB>flag", n + 1)))?;
            let labeled = match flag.trim() {
                "labeled" => true,
                "unlabeled" => false,
                other => return Err(Error::parse(path, format!("line {}: unknown flag {other:?}", n + 1))),
            };
            entries.push((id.to_string(), labeled));
        }
        Ok(Self { entries })
    }
}

/// Marks `floor(ratio · count)` ids as labeled, drawn without replacement.
pub fn split(ids: &[String], ratio: f64, seed: u64) -> Result<Manifest> {
    let k = (ratio * ids.len() as f64 + 1e-9).floor() as usize;
    if !(0.0..=1.0).contains(&ratio) || k == 0 {
        return Err(Error::Config(format!(
            "ratio {ratio} labels no image out of {}",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled = vec![false; ids.len()];
    for i in index::sample(&mut rng, ids.len(), k) {
        labeled[i] = true;
    }
    Ok(Manifest {
        entries: ids.iter().cloned().zip(labeled).collect(),
    })
}

/// Writes a binary PPM (P6) from a `3×H×W` image in `[0, 1]`.
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let &[3, h, w] = img.shape() else {
        return Err(Error::dim("write_ppm", format!("expected 3×H×W, got {:?}", img.shape())));
    };
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..h * w {
        for ch in 0..3 {
            bytes.push((img.data()[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_bytes(path, &bytes)
}

/// Writes a binary PGM (P5) holding one class index per pixel.
pub fn write_pgm(path: &Path, labels: &[u8], h: usize, w: usize) -> Result<()> {
    if labels.len() != h * w {
        return Err(Error::dim("write_pgm", format!("{} labels for {h}×{w}", labels.len())));
    }
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(labels);
    write_bytes(path, &bytes)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Splits a netpbm header into (magic, width, height, maxval) and the payload.
fn parse_netpbm<'a>(bytes: &'a [u8], path: &Path) -> Result<(&'a str, usize, usize, &'a [u8])> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, "truncated netpbm header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::parse(path, "non-ascii header"))?);
    }
    pos += 1; // single whitespace byte before the raster
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(path, format!("bad header field {s:?}")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(Error::parse(path, format!("only 8-bit files are supported, maxval {maxval}")));
    }
    Ok((fields[0], w, h, bytes.get(pos..).unwrap_or(&[])))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (magic, w, h, raster) = parse_netpbm(&bytes, path)?;
    if magic != "P6" || raster.len() != 3 * h * w {
        return Err(Error::parse(path, "expected a binary P6 image"));
    }
    let mut data = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + p] = f64::from(raster[3 * p + ch]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (magic, w, h, raster) = parse_netpbm(&bytes, path)?;
    if magic != "P5" || raster.len() != h * w {
        return Err(Error::parse(path, "expected a binary P5 label map"));
    }
    Ok((raster.to_vec(), h, w))
}

/// Writes `images/`, `labels/`, `manifest.tsv` and `dataset.cfg` under `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset, manifest: &Manifest, cfg: &DataConfig) -> Result<()> {
    for sub in ["images", "labels"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    for ((id, img), label) in ds.ids.iter().zip(&ds.images).zip(&ds.labels) {
        write_ppm(&dir.join("images").join(format!("{id}.ppm")), img)?;
        write_pgm(&dir.join("labels").join(format!("{id}.pgm")), label, ds.size, ds.size)?;
    }
    write_bytes(&dir.join("manifest.tsv"), manifest.to_text().as_bytes())?;
    write_bytes(&dir.join("dataset.cfg"), cfg.to_kv_text().as_bytes())
}

/// Reads a directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Dataset, Manifest, DataConfig)> {
    let mut kv = KeyValues::read(&dir.join("dataset.cfg"))?;
    let cfg = DataConfig::from_kv(&mut kv)?;
    kv.finish()?;
    let mpath = dir.join("manifest.tsv");
    let manifest = Manifest::parse(&fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?, &mpath)?;
    let mut ds = Dataset {
        ids: Vec::new(),
        images: Vec::new(),
        labels: Vec::new(),
        classes: cfg.classes,
        size: cfg.size,
    };
    for (id, _) in &manifest.entries {
        let img = read_ppm(&dir.join("images").join(format!("{id}.ppm")))?;
        let lpath = dir.join("labels").join(format!("{id}.pgm"));
        let (label, h, w) = read_pgm(&lpath)?;
        if (h, w) != (cfg.size, cfg.size) || img.shape() != [CHANNELS, cfg.size, cfg.size] {
            return Err(Error::parse(&lpath, format!("size {h}×{w} differs from config {}", cfg.size)));
        }
        if let Some(&bad) = label.iter().find(|&&v| v as usize >= cfg.classes) {
            return Err(Error::parse(&lpath, format!("label {bad} outside 0..{}", cfg.classes)));
        }
        ds.ids.push(id.clone());
        ds.images.push(img);
        ds.labels.push(label);
    }
    Ok((ds, manifest, cfg))
}

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::dim("confusion matrix", format!("{} counts for {classes} classes", counts.len())));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulates one label map; pixels with labels outside `0..C` are skipped.
    pub fn add(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::dim("confusion matrix", "label and prediction lengths differ"));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            let (t, p) = (t as usize, p as usize);
            if t < self.classes && p < self.classes {
                self.counts[t * self.classes + p] += 1;
            }
        }
        Ok(())
    }

    /// Per-class IoU (`None` for classes absent from both truth and
    /// prediction) and their mean.
    pub fn miou(&self) -> Result<(f64, Vec<Option<f64>>)> {
        let c = self.classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Empty("confusion matrix has no counted pixels"));
        }
        Ok((present.iter().sum::<f64>() / present.len() as f64, per_class))
    }
}
