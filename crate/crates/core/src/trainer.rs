//! Training loop: teacher pseudo labels over two views, CutMix on the
//! student path, the supervised, consistency and correlation losses, SGD
//! with momentum, EMA teacher updates and experiment bookkeeping.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{
    incoherent_cutmix, make_view_pair, mix_canonical, sample_cutmix_box, view_coherent_cutmix, AugmentConfig,
    CutMixConfig, JitterConfig, ViewPair,
};
use crate::config::{KeyValues, Ratio};
use crate::data::{generate_dataset, read_dataset, split, ConfusionMatrix, DataConfig, Dataset, Manifest};
use crate::error::{Error, Result};
use crate::geometry::{align_to_canonical_node, ViewAugConfig};
use crate::losses::{self, CorrelationBatch};
use crate::model::{channels_last, flip_soft_label, inject_label_noise, pseudo_label, EmaTeacher, SegNet, SegNetConfig, FLIP_MARGIN};
use crate::sampler::{hard_labels, sample_pixels, SampleSpec};
use crate::tensor::{Graph, NodeId, Tensor};

/// Ablation switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    NoCc,
    Nce,
    NoViewCoherentCutmix,
    SameGeometricAug,
    SupervisedOnly,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoCc,
        Variant::Nce,
        Variant::NoViewCoherentCutmix,
        Variant::SameGeometricAug,
        Variant::SupervisedOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCc => "no_cc",
            Variant::Nce => "nce",
            Variant::NoViewCoherentCutmix => "no_view_coherent_cutmix",
            Variant::SameGeometricAug => "same_geometric_aug",
            Variant::SupervisedOnly => "supervised_only",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

/// Target rows for the correlation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CcTarget {
    /// The averaged pseudo label serves both views.
    Pseudo,
    /// Each view is compared with the teacher's output on the other view.
    EmaOpposite,
}

impl fmt::Display for CcTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CcTarget::Pseudo => "pseudo",
            CcTarget::EmaOpposite => "ema_opposite",
        })
    }
}

impl FromStr for CcTarget {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "pseudo" => Ok(CcTarget::Pseudo),
            "ema_opposite" => Ok(CcTarget::EmaOpposite),
            other => Err(format!("unknown cc_target {other:?}")),
        }
    }
}

/// Where training images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Output directory of `gen-data` (with `train/` and `eval/`).
    Dir(PathBuf),
    /// Generated in memory; identical to what `gen-data` would write.
    Generate(DataConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data: DataSource,
    pub ratio: f64,
    /// Draw a fresh labeled split from `seed` instead of using the manifest.
    pub resplit: bool,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub lr: f64,
    pub fe_lr_mult: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub steps: usize,
    pub ema: f64,
    pub w_unsup: f64,
    pub w_cc: f64,
    pub n_samples: usize,
    pub smoothing: f64,
    pub tau: f64,
    pub variant: Variant,
    pub cc_target: CcTarget,
    pub eta: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub net: SegNetConfig,
    pub view: ViewAugConfig,
    pub jitter: JitterConfig,
    pub cutmix: CutMixConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Generate(DataConfig::default()),
            ratio: 0.125,
            resplit: true,
            labeled_batch: 4,
            unlabeled_batch: 4,
            lr: 0.5,
            fe_lr_mult: 0.1,
            momentum: 0.9,
            poly_power: 0.9,
            steps: 3000,
            ema: 0.99,
            w_unsup: 0.1,
            w_cc: 0.1,
            n_samples: 256,
            smoothing: 0.1,
            tau: 0.1,
            variant: Variant::Full,
            cc_target: CcTarget::Pseudo,
            eta: 0.0,
            seed: 0,
            eval_every: 500,
            net: SegNetConfig::default(),
            view: ViewAugConfig::default(),
            jitter: JitterConfig::default(),
            cutmix: CutMixConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let problems = [
            (!(self.ratio > 0.0 && self.ratio <= 1.0), "ratio must lie in (0, 1]"),
            (self.labeled_batch == 0, "labeled_batch must be positive"),
            (!(self.lr > 0.0), "lr must be positive"),
            (!(self.fe_lr_mult >= 0.0), "fe_lr_mult must be non-negative"),
            (!unit(self.momentum), "momentum must lie in [0, 1]"),
            (!(self.poly_power >= 0.0), "poly_power must be non-negative"),
            (self.steps == 0, "steps must be positive"),
            (!unit(self.ema), "ema must lie in [0, 1]"),
            (!(self.w_unsup >= 0.0 && self.w_cc >= 0.0), "loss weights must be non-negative"),
            (self.n_samples < 2, "n_samples must be at least 2"),
            (!unit(self.smoothing), "smoothing must lie in [0, 1]"),
            (!(self.tau > 0.0), "tau must be positive"),
            (!unit(self.eta), "eta must lie in [0, 1]"),
            (self.eval_every == 0, "eval_every must be positive"),
            (
                self.unlabeled_batch == 0 && self.variant != Variant::SupervisedOnly,
                "unlabeled_batch must be positive",
            ),
        ];
        if let Some((_, msg)) = problems.iter().find(|(bad, _)| *bad) {
            return Err(Error::Config(msg.to_string()));
        }
        self.net.validate()?;
        self.augment().validate()?;
        if let DataSource::Generate(d) = &self.data {
            d.validate()?;
            if d.classes != self.net.classes {
                return Err(Error::Config("data classes and network classes differ".into()));
            }
        }
        Ok(())
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            view: self.view.clone(),
            jitter: self.jitter.clone(),
            cutmix: self.cutmix.clone(),
            same_geometry: self.variant == Variant::SameGeometricAug,
        }
    }

    /// Reads training keys. Without a `data` key, the data generator keys
    /// in the same file describe an in-memory dataset; its seed is spelled
    /// `data_seed` because `seed` is the run seed.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let mut c = Self::default();
        let data_dir: Option<PathBuf> = kv.take("data")?;
        c.resplit = data_dir.is_none();
        kv.take_into("resplit", &mut c.resplit)?;
        let mut ratio = Ratio(c.ratio);
        kv.take_into("ratio", &mut ratio)?;
        c.ratio = ratio.0;
        kv.take_into("labeled_batch", &mut c.labeled_batch)?;
        kv.take_into("unlabeled_batch", &mut c.unlabeled_batch)?;
        kv.take_into("lr", &mut c.lr)?;
        kv.take_into("fe_lr_mult", &mut c.fe_lr_mult)?;
        kv.take_into("momentum", &mut c.momentum)?;
        kv.take_into("poly_power", &mut c.poly_power)?;
        kv.take_into("steps", &mut c.steps)?;
        kv.take_into("ema", &mut c.ema)?;
        kv.take_into("w_unsup", &mut c.w_unsup)?;
        kv.take_into("w_cc", &mut c.w_cc)?;
        kv.take_into("n_samples", &mut c.n_samples)?;
        kv.take_into("smoothing", &mut c.smoothing)?;
        kv.take_into("tau", &mut c.tau)?;
        kv.take_into("variant", &mut c.variant)?;
        kv.take_into("cc_target", &mut c.cc_target)?;
        kv.take_into("eta", &mut c.eta)?;
        kv.take_into("seed", &mut c.seed)?;
        kv.take_into("eval_every", &mut c.eval_every)?;
        kv.take_into("width", &mut c.net.width)?;
        kv.take_into("depth", &mut c.net.depth)?;
        kv.take_into("scale_min", &mut c.view.scale_min)?;
        kv.take_into("scale_max", &mut c.view.scale_max)?;
        kv.take_into("translate_max", &mut c.view.translate_max)?;
        kv.take_into("flip_prob", &mut c.view.flip_prob)?;
        kv.take_into("brightness", &mut c.jitter.brightness)?;
        kv.take_into("contrast_min", &mut c.jitter.contrast_min)?;
        kv.take_into("contrast_max", &mut c.jitter.contrast_max)?;
        kv.take_into("cutmix_prob", &mut c.cutmix.prob)?;
        kv.take_into("cutmix_area_min", &mut c.cutmix.area_min)?;
        kv.take_into("cutmix_area_max", &mut c.cutmix.area_max)?;
        c.data = match data_dir {
            Some(dir) => DataSource::Dir(dir),
            None => {
                let data_seed: Option<u64> = kv.take("data_seed")?;
                let mut d = DataConfig::from_kv(kv)?;
                if let Some(seed) = data_seed {
                    d.seed = seed;
                }
                c.net.classes = d.classes;
                DataSource::Generate(d)
            }
        };
        c.validate()?;
        Ok(c)
    }

    /// Snapshot in the same `key = value` format.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        match &self.data {
            DataSource::Dir(p) => put("data", p.display().to_string()),
            DataSource::Generate(_) => {}
        }
        put("resplit", self.resplit.to_string());
        put("ratio", Ratio(self.ratio).to_string());
        put("labeled_batch", self.labeled_batch.to_string());
        put("unlabeled_batch", self.unlabeled_batch.to_string());
        put("lr", self.lr.to_string());
        put("fe_lr_mult", self.fe_lr_mult.to_string());
        put("momentum", self.momentum.to_string());
        put("poly_power", self.poly_power.to_string());
        put("steps", self.steps.to_string());
        put("ema", self.ema.to_string());
        put("w_unsup", self.w_unsup.to_string());
        put("w_cc", self.w_cc.to_string());
        put("n_samples", self.n_samples.to_string());
        put("smoothing", self.smoothing.to_string());
        put("tau", self.tau.to_string());
        put("variant", self.variant.to_string());
        put("cc_target", self.cc_target.to_string());
        put("eta", self.eta.to_string());
        put("seed", self.seed.to_string());
        put("eval_every", self.eval_every.to_string());
        put("width", self.net.width.to_string());
        put("depth", self.net.depth.to_string());
        put("scale_min", self.view.scale_min.to_string());
        put("scale_max", self.view.scale_max.to_string());
        put("translate_max", self.view.translate_max.to_string());
        put("flip_prob", self.view.flip_prob.to_string());
        put("brightness", self.jitter.brightness.to_string());
        put("contrast_min", self.jitter.contrast_min.to_string());
        put("contrast_max", self.jitter.contrast_max.to_string());
        put("cutmix_prob", self.cutmix.prob.to_string());
        put("cutmix_area_min", self.cutmix.area_min.to_string());
        put("cutmix_area_max", self.cutmix.area_max.to_string());
        if let DataSource::Generate(d) = &self.data {
            s.push_str(&d.to_kv_text().replace("\nseed = ", "\ndata_seed = "));
        }
        s
    }
}

/// `base · (1 − step/total)^power`.
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    let frac = (step.min(total) as f64 / total.max(1) as f64).min(1.0);
    base * (1.0 - frac).powf(power)
}

/// `v ← m·v + g; θ ← θ − lr·v`, one learning rate per tensor.
pub fn sgd_momentum_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    lrs: &[f64],
    momentum: f64,
    velocities: &mut [Tensor],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocities.len() || params.len() != lrs.len() {
        return Err(Error::dim("sgd", "parameter, gradient, velocity and lr counts differ"));
    }
    for (((p, g), v), &lr) in params.iter_mut().zip(grads).zip(velocities.iter_mut()).zip(lrs) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::dim("sgd", format!("{:?} vs {:?}", p.shape(), g.shape())));
        }
        for ((x, &d), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vel = momentum * *vel + d;
            *x -= lr * *vel;
        }
    }
    Ok(())
}

/// Student, teacher and optimizer state.
#[derive(Clone, Debug)]
pub struct Nets {
    pub student: SegNet,
    pub teacher: EmaTeacher,
    pub velocity: Vec<Tensor>,
}

impl Nets {
    pub fn new(student: SegNet, ema: f64) -> Result<Self> {
        let velocity = student.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self {
            teacher: EmaTeacher::from_student(&student, ema)?,
            student,
            velocity,
        })
    }
}

/// Images fed to one step.
#[derive(Clone, Debug)]
pub struct StepBatch<'a> {
    pub labeled: Vec<(&'a Tensor, &'a [u8])>,
    pub unlabeled: Vec<&'a Tensor>,
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub l_sup: f64,
    pub l_unsup: f64,
    pub l_cc: f64,
    pub total: f64,
}

/// Every random decision taken by a step, for replay in tests.
#[derive(Clone, Debug, Default)]
pub struct StepTrace {
    pub label_flips: Vec<bool>,
    /// View pairs before CutMix.
    pub pairs: Vec<ViewPair>,
    /// View pairs the student saw.
    pub mixed: Vec<ViewPair>,
    /// Pixels (over the concatenated batch) whose pseudo class was flipped.
    pub noise_flips: Vec<usize>,
    pub sampled: Vec<usize>,
}

/// Mirrors a `C×H×W` image left to right.
pub fn flip_image(img: &Tensor) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = img.clone();
    for (dst, src) in out.data_mut().chunks_exact_mut(w).zip(img.data().chunks_exact(w)) {
        dst.iter_mut().zip(src.iter().rev()).for_each(|(d, s)| *d = *s);
    }
    debug_assert_eq!(out.numel() % (h * w), 0);
    out
}

/// Mirrors an `H×W` label map left to right.
pub fn flip_labels(labels: &[u8], w: usize) -> Vec<u8> {
    labels.chunks_exact(w).flat_map(|row| row.iter().rev().copied()).collect()
}

/// Student probabilities for one view, aligned to the canonical frame and
/// renormalized: `(H·W)×C` rows.
fn aligned_student_rows(
    g: &mut Graph,
    net: &SegNet,
    params: &[NodeId],
    view: &Tensor,
    t: &crate::geometry::AffineTransform,
) -> Result<NodeId> {
    let (h, w) = (view.shape()[1], view.shape()[2]);
    let x = g.constant(view.clone());
    let logits = net.forward_node(g, params, x)?;
    let rows = losses::to_pixel_rows(g, logits)?;
    let probs = g.softmax_rows(rows)?;
    let map = losses::from_pixel_rows(g, probs, h, w)?;
    let (aligned, _) = align_to_canonical_node(g, map, t)?;
    let back = losses::to_pixel_rows(g, aligned)?;
    g.l1_normalize_rows(back)
}

fn gather_host_rows(rows: &[f64], classes: usize, idx: &[usize]) -> Result<Tensor> {
    let mut out = Vec::with_capacity(idx.len() * classes);
    for &i in idx {
        out.extend_from_slice(&rows[i * classes..(i + 1) * classes]);
    }
    Tensor::new(&[idx.len(), classes], out)
}

fn check_finite(name: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { op: name })
    }
}

/// Loss graph of one step before any parameter update.
pub struct StepGraph {
    pub graph: Graph,
    /// Student parameter leaves in declaration order.
    pub params: Vec<NodeId>,
    pub total: NodeId,
    pub losses: StepLosses,
    pub trace: StepTrace,
}

/// Builds the weighted step loss for `student` with `teacher` targets.
/// `rng_sup` drives labeled augmentation and `rng_unsup` every unlabeled
/// decision, so the supervised trajectory does not depend on whether the
/// unlabeled branch runs.
pub fn build_step_loss(
    cfg: &TrainConfig,
    student: &SegNet,
    teacher: &SegNet,
    batch: &StepBatch<'_>,
    rng_sup: &mut ChaCha8Rng,
    rng_unsup: &mut ChaCha8Rng,
) -> Result<StepGraph> {
    let classes = student.config().classes;
    let mut trace = StepTrace::default();
    let mut g = Graph::new();
    let params = student.bind(&mut g, true);

    // Supervised branch with random horizontal flips.
    let mut logits = Vec::with_capacity(batch.labeled.len());
    let mut labels = Vec::with_capacity(batch.labeled.len());
    for &(img, lbl) in &batch.labeled {
        let flip = rng_sup.random_bool(0.5);
        trace.label_flips.push(flip);
        let w = img.shape()[2];
        let (img, lbl) = if flip {
            (flip_image(img), flip_labels(lbl, w))
        } else {
            (img.clone(), lbl.to_vec())
        };
        let x = g.constant(img);
        logits.push(student.forward_node(&mut g, &params, x)?);
        labels.push(lbl);
    }
    let label_refs: Vec<&[u8]> = labels.iter().map(Vec::as_slice).collect();
    let l_sup = losses::supervised_ce_batch(&mut g, &logits, &label_refs, cfg.smoothing)?;

    let (l_unsup, l_cc) = if cfg.variant == Variant::SupervisedOnly || batch.unlabeled.is_empty() {
        let zero = g.constant(Tensor::scalar(0.0));
        (zero, zero)
    } else {
        unlabeled_losses(cfg, student, teacher, batch, &mut g, &params, classes, rng_unsup, &mut trace)?
    };

    let weights = losses::LossWeights {
        unsup: cfg.w_unsup,
        cc: if cfg.variant == Variant::NoCc { 0.0 } else { cfg.w_cc },
    };
    let total = losses::total_loss(&mut g, l_sup, l_unsup, l_cc, weights)?;
    let losses = StepLosses {
        l_sup: check_finite("l_sup", g.value(l_sup).item())?,
        l_unsup: check_finite("l_unsup", g.value(l_unsup).item())?,
        l_cc: check_finite("l_cc", g.value(l_cc).item())?,
        total: check_finite("total", g.value(total).item())?,
    };
    Ok(StepGraph {
        graph: g,
        params,
        total,
        losses,
        trace,
    })
}

/// One optimization step: loss, backward, SGD with momentum (feature
/// extractor at `lr · fe_lr_mult`), then the EMA teacher update.
pub fn train_step(
    cfg: &TrainConfig,
    nets: &mut Nets,
    batch: &StepBatch<'_>,
    lr: f64,
    rng_sup: &mut ChaCha8Rng,
    rng_unsup: &mut ChaCha8Rng,
) -> Result<(StepLosses, StepTrace)> {
    let StepGraph {
        mut graph,
        params,
        total,
        losses,
        trace,
    } = build_step_loss(cfg, &nets.student, &nets.teacher.net, batch, rng_sup, rng_unsup)?;
    graph.backward(total)?;
    let grads: Vec<Tensor> = params
        .iter()
        .zip(nets.student.params())
        .map(|(&id, p)| graph.grad(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    let lrs: Vec<f64> = (0..grads.len())
        .map(|i| if nets.student.is_feature_extractor(i) { lr * cfg.fe_lr_mult } else { lr })
        .collect();
    sgd_momentum_step(nets.student.params_mut(), &grads, &lrs, cfg.momentum, &mut nets.velocity)?;
    nets.teacher.update(&nets.student)?;
    Ok((losses, trace))
}

#[allow(clippy::too_many_arguments)]
fn unlabeled_losses(
    cfg: &TrainConfig,
    student: &SegNet,
    teacher: &SegNet,
    batch: &StepBatch<'_>,
    g: &mut Graph,
    params: &[NodeId],
    classes: usize,
    rng: &mut ChaCha8Rng,
    trace: &mut StepTrace,
) -> Result<(NodeId, NodeId)> {
    let aug = cfg.augment();
    let b = batch.unlabeled.len();
    let pairs = batch
        .unlabeled
        .iter()
        .map(|img| make_view_pair(img, rng, &aug))
        .collect::<Result<Vec<_>>>()?;
    let pls = pairs
        .iter()
        .map(|p| pseudo_label(teacher, p))
        .collect::<Result<Vec<_>>>()?;

    // CutMix on the student inputs, donor at the rolled batch index.
    let mut mixed = Vec::with_capacity(b);
    let mut targets = Vec::with_capacity(b);
    for k in 0..b {
        let d = (k + 1) % b;
        let (h, w) = (pairs[k].x.shape()[1], pairs[k].x.shape()[2]);
        let pair = if cfg.variant == Variant::NoViewCoherentCutmix {
            incoherent_cutmix(&pairs[k], &pairs[d], d, rng, &cfg.cutmix)?
        } else if cfg.cutmix.prob > 0.0 && rng.random_bool(cfg.cutmix.prob) {
            let region = sample_cutmix_box(rng, h, w, &cfg.cutmix);
            view_coherent_cutmix(&pairs[k], &pairs[d], region, d)?
        } else {
            pairs[k].clone()
        };
        let (mut y, mut a0, mut a1) = (pls[k].y_hat.clone(), pls[k].aligned[0].clone(), pls[k].aligned[1].clone());
        if let Some(rec) = &pair.cutmix {
            y = mix_canonical(&y, &pls[d].y_hat, &rec.region)?;
            a0 = mix_canonical(&a0, &pls[d].aligned[0], &rec.region)?;
            a1 = mix_canonical(&a1, &pls[d].aligned[1], &rec.region)?;
        }
        targets.push((channels_last(&y), channels_last(&a0), channels_last(&a1)));
        mixed.push(pair);
    }

    let mut rows = Vec::with_capacity(b);
    let mut rows_prime = Vec::with_capacity(b);
    for pair in &mixed {
        rows.push(aligned_student_rows(g, student, params, &pair.x, &pair.t)?);
        rows_prime.push(aligned_student_rows(g, student, params, &pair.x_prime, &pair.t_prime)?);
    }
    let p = g.concat_rows(&rows)?;
    let p_prime = g.concat_rows(&rows_prime)?;
    let y_rows: Vec<f64> = targets.iter().flat_map(|t| t.0.iter().copied()).collect();
    let valid: Vec<bool> = mixed.iter().flat_map(|m| m.valid.iter().copied()).collect();
    let y_node = g.constant(Tensor::new(&[valid.len(), classes], y_rows.clone())?);
    let l_unsup = losses::consistency_loss(g, p, p_prime, y_node, &valid)?;

    // Hard pseudo classes, optional label noise, category-normalized sampling.
    let mut hard = hard_labels(&y_rows, classes);
    let (mut soft, mut soft_prime) = match cfg.cc_target {
        CcTarget::Pseudo => (y_rows, None),
        CcTarget::EmaOpposite => (
            targets.iter().flat_map(|t| t.2.iter().copied()).collect(),
            Some(targets.iter().flat_map(|t| t.1.iter().copied()).collect::<Vec<f64>>()),
        ),
    };
    let flips = inject_label_noise(&mut hard, &mut soft, classes, cfg.eta, rng)?;
    if let Some(sp) = soft_prime.as_mut() {
        for &i in &flips {
            flip_soft_label(&mut sp[i * classes..(i + 1) * classes], hard[i], FLIP_MARGIN);
        }
    }
    let spec = SampleSpec::category_normalized(&hard, &valid, classes, cfg.n_samples)?;
    let idx = sample_pixels(&spec, rng)?;
    let f = g.gather_rows(p, &idx)?;
    let f_prime = g.gather_rows(p_prime, &idx)?;

    let l_cc = if cfg.variant == Variant::Nce {
        let cls: Vec<usize> = idx.iter().map(|&i| hard[i]).collect();
        match (
            losses::info_nce(g, f, &cls, cfg.tau),
            losses::info_nce(g, f_prime, &cls, cfg.tau),
        ) {
            (Ok(a), Ok(b)) => {
                let s = g.add(a, b)?;
                g.scale(s, 0.5)?
            }
            (Err(Error::Empty(_)), _) | (_, Err(Error::Empty(_))) => g.constant(Tensor::scalar(0.0)),
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    } else {
        let target = g.constant(gather_host_rows(&soft, classes, &idx)?);
        let target_prime = match &soft_prime {
            Some(sp) => g.constant(gather_host_rows(sp, classes, &idx)?),
            None => target,
        };
        let batch = CorrelationBatch {
            f,
            f_prime,
            target,
            target_prime,
            indices: idx.clone(),
        };
        losses::correlation_consistency(g, &batch)?
    };

    trace.pairs = pairs;
    trace.mixed = mixed;
    trace.noise_flips = flips;
    trace.sampled = idx;
    Ok((l_unsup, l_cc))
}

/// Mean IoU of `net`'s argmax predictions over `ds`.
pub fn evaluate(net: &SegNet, ds: &Dataset) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(ds.classes);
    for (img, label) in ds.images.iter().zip(&ds.labels) {
        cm.add(label, &net.predict(img)?)?;
    }
    Ok(cm.miou()?.0)
}

/// Training and evaluation images plus an optional stored split.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Dataset,
    pub eval: Dataset,
    pub manifest: Option<Manifest>,
}

impl Datasets {
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        Ok(Self {
            train: generate_dataset(cfg, cfg.count, cfg.seed)?,
            eval: generate_dataset(cfg, cfg.eval_count, cfg.eval_seed)?,
            manifest: None,
        })
    }

    /// Reads `dir/train` and `dir/eval` as written by `gen-data`.
    pub fn read(dir: &Path) -> Result<Self> {
        let (train, manifest, _) = read_dataset(&dir.join("train"))?;
        let (eval, _, _) = read_dataset(&dir.join("eval"))?;
        Ok(Self {
            train,
            eval,
            manifest: Some(manifest),
        })
    }

    pub fn load(source: &DataSource) -> Result<Self> {
        match source {
            DataSource::Dir(d) => Self::read(d),
            DataSource::Generate(c) => Self::generate(c),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub losses: StepLosses,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalPoint {
    pub step: usize,
    pub miou: f64,
}

/// Everything recorded about one training run.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalPoint>,
    /// Best evaluated mIoU.
    pub final_miou: f64,
    pub wall_time: Duration,
    /// Student weights at the best evaluation.
    pub best_net: SegNet,
}

impl RunRecord {
    pub fn mean_losses(&self) -> StepLosses {
        mean_of(&self.steps)
    }

    /// One row per evaluation point with the losses averaged since the
    /// previous one. Wall time is left out so reruns compare byte for byte.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("step,lr,l_sup,l_unsup,l_cc,total,miou\n");
        let mut start = 0;
        for e in &self.evals {
            let window: Vec<StepRecord> = self.steps[start..]
                .iter()
                .take_while(|s| s.step <= e.step)
                .copied()
                .collect();
            start += window.len();
            let m = mean_of(&window);
            let lr = window.last().map_or(0.0, |s| s.lr);
            out.push_str(&format!(
                "{},{lr:e},{:e},{:e},{:e},{:e},{:e}\n",
                e.step, m.l_sup, m.l_unsup, m.l_cc, m.total, e.miou
            ));
        }
        out
    }
}

fn mean_of(steps: &[StepRecord]) -> StepLosses {
    let n = steps.len().max(1) as f64;
    let mut m = StepLosses::default();
    for s in steps {
        m.l_sup += s.losses.l_sup / n;
        m.l_unsup += s.losses.l_unsup / n;
        m.l_cc += s.losses.l_cc / n;
        m.total += s.losses.total / n;
    }
    m
}

/// Seeded RNG on its own stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trains one model according to `cfg` and evaluates it periodically.
pub fn run_experiment(cfg: &TrainConfig, data: &Datasets) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let manifest = match (&data.manifest, cfg.resplit) {
        (Some(m), false) => m.clone(),
        _ => split(&data.train.ids, cfg.ratio, cfg.seed)?,
    };
    let labeled = manifest.labeled();
    let unlabeled = manifest.unlabeled();
    if labeled.is_empty() {
        return Err(Error::Empty("no labeled images"));
    }
    if unlabeled.is_empty() && cfg.variant != Variant::SupervisedOnly {
        return Err(Error::Empty("no unlabeled images"));
    }
    let mut net_cfg = cfg.net;
    net_cfg.classes = data.train.classes;
    let student = SegNet::init(net_cfg, &mut stream_rng(cfg.seed, 0))?;
    let mut nets = Nets::new(student, cfg.ema)?;
    let mut rng_sup = stream_rng(cfg.seed, 1);
    let mut rng_unsup = stream_rng(cfg.seed, 2);

    let mut steps = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let mut best: Option<(f64, SegNet)> = None;
    for step in 0..cfg.steps {
        let lr = poly_lr(cfg.lr, step, cfg.steps, cfg.poly_power);
        let lab = draw(&mut rng_sup, &labeled, cfg.labeled_batch);
        let unl = if cfg.variant == Variant::SupervisedOnly {
            Vec::new()
        } else {
            draw(&mut rng_unsup, &unlabeled, cfg.unlabeled_batch)
        };
        let batch = StepBatch {
            labeled: lab.iter().map(|&i| (&data.train.images[i], data.train.labels[i].as_slice())).collect(),
            unlabeled: unl.iter().map(|&i| &data.train.images[i]).collect(),
        };
        let (losses, _) = train_step(cfg, &mut nets, &batch, lr, &mut rng_sup, &mut rng_unsup)?;
        steps.push(StepRecord { step: step + 1, lr, losses });
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let miou = evaluate(&nets.student, &data.eval)?;
            evals.push(EvalPoint { step: step + 1, miou });
            if best.as_ref().is_none_or(|(b, _)| miou > *b) {
                best = Some((miou, nets.student.clone()));
            }
        }
    }
    let (final_miou, best_net) = best.expect("at least one evaluation");
    Ok(RunRecord {
        config: cfg.clone(),
        steps,
        evals,
        final_miou,
        wall_time: started.elapsed(),
        best_net,
    })
}

/// `k` distinct picks from `pool` (all of it, shuffled, when `k ≥ len`).
fn draw(rng: &mut ChaCha8Rng, pool: &[usize], k: usize) -> Vec<usize> {
    let k = k.min(pool.len());
    index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

/// Grid of runs for [`run_suite`].
#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub base: TrainConfig,
    pub variants: Vec<Variant>,
    pub etas: Vec<f64>,
    pub w_ccs: Vec<f64>,
    /// Worker threads; runs share nothing mutable.
    pub jobs: usize,
}

impl SuiteConfig {
    /// Reads `variants`, `etas`, `w_cc_values` and `jobs` (comma lists)
    /// on top of a training config.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let list = |kv: &mut KeyValues, key: &str| -> Result<Option<Vec<String>>> {
            Ok(kv
                .take::<String>(key)?
                .map(|s| s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()))
        };
        let variants = list(kv, "variants")?;
        let etas = list(kv, "etas")?;
        let w_ccs = list(kv, "w_cc_values")?;
        let jobs: usize = kv.take("jobs")?.unwrap_or(1);
        let base = TrainConfig::from_kv(kv)?;
        let path = kv.path().to_path_buf();
        let parse_f = |v: Vec<String>| -> Result<Vec<f64>> {
            v.iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::parse(&path, format!("{s:?}: {e}"))))
                .collect()
        };
        Ok(Self {
            variants: match variants {
                Some(v) => v
                    .iter()
                    .map(|s| s.parse().map_err(|e: String| Error::parse(&path, e)))
                    .collect::<Result<_>>()?,
                None => vec![base.variant],
            },
            etas: etas.map(parse_f).transpose()?.unwrap_or_else(|| vec![base.eta]),
            w_ccs: w_ccs.map(parse_f).transpose()?.unwrap_or_else(|| vec![base.w_cc]),
            jobs: jobs.max(1),
            base,
        })
    }

    /// Every (variant, η, w_CC, seed) combination.
    pub fn runs(&self, seeds: &[u64]) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            for &eta in &self.etas {
                for &w_cc in &self.w_ccs {
                    for &seed in seeds {
                        out.push(TrainConfig {
                            variant,
                            eta,
                            w_cc,
                            seed,
                            resplit: true,
                            ..self.base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

/// Outcome of one suite run.
#[derive(Clone, Debug)]
pub struct SuiteRow {
    pub config: TrainConfig,
    pub result: std::result::Result<RunRecord, String>,
}

/// Runs every configuration, recording failures instead of aborting.
pub fn run_suite(configs: &[TrainConfig], data: &Datasets, jobs: usize) -> Vec<SuiteRow> {
    let jobs = jobs.clamp(1, configs.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<SuiteRow>> = vec![None; configs.len()];
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(cfg) = configs.get(i) else { break };
                let row = SuiteRow {
                    config: cfg.clone(),
                    result: run_experiment(cfg, data).map_err(|e| e.to_string()),
                };
                results.lock().expect("no panics while holding the lock")[i] = Some(row);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every run finished")).collect()
}

/// Per-run rows followed by one aggregate row per (variant, ratio, η, w_CC).
pub fn suite_csv(rows: &[SuiteRow]) -> String {
    let mut out = String::from("kind,variant,ratio,seed,eta,w_cc,final_miou,miou_std,l_sup,l_unsup,l_cc,total,status\n");
    let mut groups: Vec<(Variant, String, String, String, Vec<f64>)> = Vec::new();
    for r in rows {
        let c = &r.config;
        let (ratio, eta, w_cc) = (Ratio(c.ratio).to_string(), c.eta.to_string(), c.w_cc.to_string());
        let key_pos = groups
            .iter()
            .position(|g| g.0 == c.variant && g.1 == ratio && g.2 == eta && g.3 == w_cc)
            .unwrap_or_else(|| {
                groups.push((c.variant, ratio.clone(), eta.clone(), w_cc.clone(), Vec::new()));
                groups.len() - 1
            });
        match &r.result {
            Ok(rec) => {
                let m = rec.mean_losses();
                groups[key_pos].4.push(rec.final_miou);
                out.push_str(&format!(
                    "run,{},{ratio},{},{eta},{w_cc},{:.6},,{:.6},{:.6},{:.6},{:.6},ok\n",
                    c.variant, c.seed, rec.final_miou, m.l_sup, m.l_unsup, m.l_cc, m.total
                ));
            }
            Err(e) => out.push_str(&format!(
                "run,{},{ratio},{},{eta},{w_cc},,,,,,,error: {}\n",
                c.variant,
                c.seed,
                e.replace(',', ";")
            )),
        }
    }
    for (variant, ratio, eta, w_cc, vals) in &groups {
        let (mean, std) = mean_std(vals);
        out.push_str(&format!(
            "aggregate,{variant},{ratio},mean,{eta},{w_cc},{mean:.6},{std:.6},,,,,{} runs\n",
            vals.len()
        ));
    }
    out
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}
