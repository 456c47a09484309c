//! Targeted dense attacks on segmentation backends and their detection by
//! comparing an image with its resynthesis in HOG space.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Grid, ImageRgb, LabelSpec, SemanticMap};
use crate::error::{Error, Result};
use crate::evalharness::{auroc, roc_from_pairs, Sweep};
use crate::nn::Tensor;
use crate::segmentation::{argmax_labels, predict_labels, SegmentationBackend};
use crate::synthesis::GeneratorBackend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Shift,
    Pure,
}

impl TargetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetKind::Shift => "shift",
            TargetKind::Pure => "pure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub max_iter: usize,
    /// L∞ size of one signed-gradient step.
    pub step_linf: f64,
    /// L∞ radius around the original image that the result never leaves.
    pub total_linf_budget: f64,
    pub target_kind: TargetKind,
    pub shift_offset: i64,
    /// Constant label of PURE targets; `None` draws one per image.
    #[serde(default)]
    pub pure_label: Option<u8>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            step_linf: 0.05,
            total_linf_budget: 0.05,
            target_kind: TargetKind::Shift,
            shift_offset: 1,
            pure_label: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        if !(self.step_linf > 0.0) || !(self.total_linf_budget > 0.0) {
            return Err(Error::invalid("attack step and budget must be positive"));
        }
        Ok(())
    }
}

/// `(pred + offset) mod C`; void pixels keep their value.
pub fn make_shift_target(pred: &SemanticMap, offset: i64, spec: &LabelSpec) -> Result<SemanticMap> {
    let c = spec.num_classes() as i64;
    if offset.rem_euclid(c) == 0 {
        return Err(Error::invalid(format!(
            "offset {offset} is a multiple of the {c} classes"
        )));
    }
    let void = spec.void_id();
    let (w, h) = pred.dims();
    let labels = pred
        .labels()
        .iter()
        .map(|&l| {
            if l == void || !spec.is_known(l) {
                l
            } else {
                (l as i64 + offset).rem_euclid(c) as u8
            }
        })
        .collect();
    SemanticMap::new(Grid::from_vec(w, h, labels)?, spec)
}

pub fn make_pure_target(width: usize, height: usize, label: u8, spec: &LabelSpec) -> Result<SemanticMap> {
    if !spec.is_known(label) {
        return Err(Error::invalid(format!(
            "pure target label {label} is not a known class"
        )));
    }
    Ok(SemanticMap::filled(width, height, label))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub adversarial: ImageRgb,
    pub iterations_used: usize,
    /// Fraction of (non-void) target pixels predicted as their target.
    pub success_rate: f64,
    pub linf_norm: f64,
}

/// Clamp `v` to `[0, 1]` and to `|v - o| <= r`, exactly in floating point.
fn clamp_to_ball(v: f64, o: f64, r: f64) -> f64 {
    let mut out = v.clamp((o - r).max(0.0), (o + r).min(1.0));
    while (out - o).abs() > r {
        out = if out > o {
            f64::from_bits(out.to_bits() - 1)
        } else {
            next_up(out)
        };
    }
    out.clamp(0.0, 1.0)
}

fn next_up(x: f64) -> f64 {
    if x == 0.0 {
        return f64::from_bits(1);
    }
    if x > 0.0 {
        f64::from_bits(x.to_bits() + 1)
    } else {
        f64::from_bits(x.to_bits() - 1)
    }
}

/// Dense targeted attack with signed-gradient steps.
///
/// Each iteration restricts to pixels whose prediction is not yet the
/// target, ascends `Σ (logit[target] − logit[pred])` over them by
/// `step_linf · sign(∇)`, and projects back onto the L∞ ball of radius
/// `total_linf_budget` around the original and onto `[0, 1]`.
pub fn dag_attack(
    image: &ImageRgb,
    backend: &dyn SegmentationBackend,
    target: &SemanticMap,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    if !backend.capabilities().gradient_access {
        return Err(Error::Capability("DAG needs a backend with input gradients".into()));
    }
    if target.dims() != image.dims() {
        return Err(Error::shape("attack target and image differ in size"));
    }
    let spec = backend.label_spec();
    let (w, h) = image.dims();
    let n = w * h;
    let tgt = target.labels();
    let considered: Vec<bool> = tgt.iter().map(|&t| spec.is_known(t)).collect();
    let n_considered = considered.iter().filter(|&&c| c).count();

    let orig = image.tensor();
    let mut adv = image.clone();
    let mut iterations = 0;
    let mut logits = backend.predict_logits(&adv)?;
    loop {
        let pred = argmax_labels(&logits);
        let active: Vec<usize> = (0..n)
            .filter(|&i| considered[i] && pred.labels()[i] != tgt[i])
            .collect();
        if active.is_empty() || iterations == cfg.max_iter {
            let hits = (0..n).filter(|&i| considered[i] && pred.labels()[i] == tgt[i]).count();
            let success_rate = if n_considered == 0 {
                1.0
            } else {
                hits as f64 / n_considered as f64
            };
            let linf_norm = adv.linf_distance(image);
            return Ok(AttackOutcome {
                adversarial: adv,
                iterations_used: iterations,
                success_rate,
                linf_norm,
            });
        }
        let mut dl = Tensor::zeros(logits.channels(), h, w);
        for &i in &active {
            let d = dl.data_mut();
            d[tgt[i] as usize * n + i] += 1.0;
            d[pred.labels()[i] as usize * n + i] -= 1.0;
        }
        let grad = backend.input_gradient(&adv, &dl)?;
        let mut t = adv.into_tensor();
        for ((v, &g), &o) in t.data_mut().iter_mut().zip(grad.data()).zip(orig.data()) {
            let step = if g > 0.0 {
                cfg.step_linf
            } else if g < 0.0 {
                -cfg.step_linf
            } else {
                0.0
            };
            *v = clamp_to_ball(*v + step, o, cfg.total_linf_budget);
        }
        adv = ImageRgb::from_tensor(t)?;
        iterations += 1;
        logits = backend.predict_logits(&adv)?;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HogConfig {
    pub cell: usize,
    pub block: usize,
    pub bins: usize,
    /// L2-Hys clipping value.
    pub clip: f64,
}

impl Default for HogConfig {
    fn default() -> Self {
        Self {
            cell: 8,
            block: 2,
            bins: 9,
            clip: 0.2,
        }
    }
}

impl HogConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cell == 0 || self.block == 0 || self.bins == 0 {
            return Err(Error::invalid("HOG cell, block and bin counts must be positive"));
        }
        if !(self.clip > 0.0) {
            return Err(Error::invalid("HOG clip must be positive"));
        }
        Ok(())
    }

    /// `(blocks_y, blocks_x)` for an image, or an error if no block fits.
    pub fn block_grid(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        let (cx, cy) = (width / self.cell, height / self.cell);
        if cx < self.block || cy < self.block {
            return Err(Error::shape(format!(
                "{width}x{height} image is smaller than one {0}x{0}-cell HOG block",
                self.block
            )));
        }
        Ok((cy - self.block + 1, cx - self.block + 1))
    }

    pub fn feature_len(&self, width: usize, height: usize) -> Result<usize> {
        let (by, bx) = self.block_grid(width, height)?;
        Ok(by * bx * self.block * self.block * self.bins)
    }
}

/// Histogram-of-oriented-gradients descriptor of the luminance.
///
/// Central-difference gradients (replicated borders), unsigned
/// orientations linearly split between the two nearest of `bins` centres
/// `0°, 180°/bins, …`, per-cell histograms over the cell-aligned crop, and
/// L2-Hys normalization over overlapping blocks (stride one cell). Blocks
/// without gradient energy stay zero.
pub fn hog_features(image: &ImageRgb, cfg: &HogConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let (w, h) = image.dims();
    let (by, bx) = cfg.block_grid(w, h)?;
    let (ncx, ncy) = (w / cfg.cell, h / cfg.cell);
    let lum = image.luminance();
    let l = lum.as_slice();
    let at = |x: isize, y: isize| -> f64 {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        l[yc * w + xc]
    };
    let nb = cfg.bins;
    let bin_width = std::f64::consts::PI / nb as f64;
    let mut cells = vec![0.0; ncx * ncy * nb];
    for y in 0..ncy * cfg.cell {
        for x in 0..ncx * cfg.cell {
            let (xi, yi) = (x as isize, y as isize);
            let gx = at(xi + 1, yi) - at(xi - 1, yi);
            let gy = at(xi, yi + 1) - at(xi, yi - 1);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut ang = gy.atan2(gx);
            if ang < 0.0 {
                ang += std::f64::consts::PI;
            }
            if ang >= std::f64::consts::PI {
                ang -= std::f64::consts::PI;
            }
            let pos = ang / bin_width;
            let b0 = pos.floor() as usize % nb;
            let frac = pos - pos.floor();
            let b1 = (b0 + 1) % nb;
            let cell = (y / cfg.cell) * ncx + x / cfg.cell;
            cells[cell * nb + b0] += mag * (1.0 - frac);
            cells[cell * nb + b1] += mag * frac;
        }
    }
    let bl = cfg.block;
    let mut out = Vec::with_capacity(by * bx * bl * bl * nb);
    let mut v = Vec::with_capacity(bl * bl * nb);
    for byi in 0..by {
        for bxi in 0..bx {
            v.clear();
            for cy in byi..byi + bl {
                for cx in bxi..bxi + bl {
                    let c = cy * ncx + cx;
                    v.extend_from_slice(&cells[c * nb..(c + 1) * nb]);
                }
            }
            l2_hys(&mut v, cfg.clip);
            out.extend_from_slice(&v);
        }
    }
    Ok(out)
}

fn l2_hys(v: &mut [f64], clip: f64) {
    const EPS: f64 = 1e-10;
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    v.iter_mut().for_each(|x| *x = (*x / (norm + EPS)).min(clip));
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm + EPS);
    }
}

pub fn hog_distance(a: &ImageRgb, b: &ImageRgb, cfg: &HogConfig) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape("HOG distance needs equally sized images"));
    }
    let (fa, fb) = (hog_features(a, cfg)?, hog_features(b, cfg)?);
    Ok(fa.iter().zip(&fb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

/// HOG distance between an image and the resynthesis of its predicted labels.
pub fn resynth_distance(
    image: &ImageRgb,
    backend: &dyn SegmentationBackend,
    gen: &dyn GeneratorBackend,
    cfg: &HogConfig,
) -> Result<f64> {
    let pred = predict_labels(backend, image)?;
    let resynth = gen.generate(&pred)?;
    hog_distance(image, &resynth, cfg)
}

/// `P(attacked) = σ(weight · d + bias)` on a scalar distance `d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticDetector {
    pub weight: f64,
    pub bias: f64,
}

pub const DETECTOR_THRESHOLD: f64 = 0.5;

impl LogisticDetector {
    pub fn probability(&self, d: f64) -> f64 {
        1.0 / (1.0 + (-(self.weight * d + self.bias)).exp())
    }

    pub fn is_attack(&self, d: f64) -> bool {
        self.probability(d) >= DETECTOR_THRESHOLD
    }

    /// Gradient-descent fit of the logistic loss (tiny L2 penalty keeps the
    /// separable case finite). Labels: `true` = attacked.
    pub fn fit(x: &[f64], y: &[bool]) -> Result<Self> {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::invalid("detector fit needs equally long, nonempty inputs"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("detector input distance".into()));
        }
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
            .sqrt()
            .max(1e-12);
        let z: Vec<f64> = x.iter().map(|v| (v - mean) / std).collect();
        const L2: f64 = 1e-3;
        const LR: f64 = 0.5;
        let (mut w, mut b) = (0.0, 0.0);
        for _ in 0..20_000 {
            let (mut gw, mut gb) = (0.0, 0.0);
            for (&zi, &yi) in z.iter().zip(y) {
                let p = 1.0 / (1.0 + (-(w * zi + b)).exp());
                let e = p - if yi { 1.0 } else { 0.0 };
                gw += e * zi;
                gb += e;
            }
            gw = gw / n + L2 * w;
            gb /= n;
            w -= LR * gw;
            b -= LR * gb;
            if gw.abs() < 1e-10 && gb.abs() < 1e-10 {
                break;
            }
        }
        Ok(Self {
            weight: w / std,
            bias: b - w * mean / std,
        })
    }

    pub fn accuracy(&self, x: &[f64], y: &[bool]) -> f64 {
        let hits = x.iter().zip(y).filter(|(&d, &l)| self.is_attack(d) == l).count();
        hits as f64 / x.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorMetrics {
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub test_auroc: f64,
    /// Indices of the held-out pairs.
    pub test_indices: Vec<usize>,
}

/// Fit on a random `train_fraction` of the clean/attacked pairs and
/// evaluate on the rest. Pair `i` is `(clean[i], adv[i])`; both members
/// always land on the same side of the split.
pub fn fit_detector<R: Rng + ?Sized>(
    clean: &[f64],
    adv: &[f64],
    train_fraction: f64,
    rng: &mut R,
) -> Result<(LogisticDetector, DetectorMetrics)> {
    if clean.is_empty() || clean.len() != adv.len() {
        return Err(Error::invalid(
            "detector needs equally many clean and attacked distances",
        ));
    }
    if !(0.0 < train_fraction && train_fraction < 1.0) {
        return Err(Error::invalid("train fraction must lie in (0, 1)"));
    }
    let n = clean.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::invalid(format!(
            "an {train_fraction} split of {n} pairs leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let (train, test) = idx.split_at(n_train);
    let gather = |ids: &[usize]| {
        let mut x = Vec::with_capacity(2 * ids.len());
        let mut y = Vec::with_capacity(2 * ids.len());
        for &i in ids {
            x.push(clean[i]);
            y.push(false);
            x.push(adv[i]);
            y.push(true);
        }
        (x, y)
    };
    let (xtr, ytr) = gather(train);
    let (xte, yte) = gather(test);
    let det = LogisticDetector::fit(&xtr, &ytr)?;
    let mut test_indices = test.to_vec();
    test_indices.sort_unstable();
    let metrics = DetectorMetrics {
        train_pairs: train.len(),
        test_pairs: test.len(),
        train_accuracy: det.accuracy(&xtr, &ytr),
        test_accuracy: det.accuracy(&xte, &yte),
        test_auroc: auroc(&roc_from_pairs(&xte, &yte, Sweep::Exact)?),
        test_indices,
    };
    Ok((det, metrics))
}

/// Separation of attacked from clean by a scalar score (higher = more
/// suspicious), as AUROC.
pub fn separation_auroc(clean: &[f64], adv: &[f64]) -> Result<f64> {
    let x: Vec<f64> = clean.iter().chain(adv).copied().collect();
    let y: Vec<bool> = clean.iter().map(|_| false).chain(adv.iter().map(|_| true)).collect();
    Ok(auroc(&roc_from_pairs(&x, &y, Sweep::Exact)?))
}

/// Mean IoU over the classes present in either map.
pub fn miou(a: &[u8], b: &[u8]) -> f64 {
    let mut inter = [0usize; 256];
    let mut union = [0usize; 256];
    for (&x, &y) in a.iter().zip(b) {
        if x == y {
            inter[x as usize] += 1;
            union[x as usize] += 1;
        } else {
            union[x as usize] += 1;
            union[y as usize] += 1;
        }
    }
    let (mut sum, mut k) = (0.0, 0);
    for c in 0..256 {
        if union[c] > 0 {
            sum += inter[c] as f64 / union[c] as f64;
            k += 1;
        }
    }
    if k == 0 {
        1.0
    } else {
        sum / k as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScConfig {
    pub n_pairs: usize,
    pub patch: usize,
}

impl Default for ScConfig {
    fn default() -> Self {
        Self {
            n_pairs: 50,
            patch: 256,
        }
    }
}

/// Spatial consistency: segment random overlapping crop pairs
/// independently and average the mIoU of their predictions on the overlap.
/// Low values suggest an attack.
pub fn sc_score<R: Rng + ?Sized>(
    image: &ImageRgb,
    backend: &dyn SegmentationBackend,
    cfg: &ScConfig,
    rng: &mut R,
) -> Result<f64> {
    let (w, h) = image.dims();
    let p = cfg.patch;
    if p == 0 || cfg.n_pairs == 0 {
        return Err(Error::invalid(
            "spatial consistency needs a positive patch size and pair count",
        ));
    }
    if w < p || h < p {
        return Err(Error::shape(format!("{w}x{h} image is smaller than the {p}px crop")));
    }
    let mut total = 0.0;
    for _ in 0..cfg.n_pairs {
        let (ax, ay) = (rng.random_range(0..=w - p), rng.random_range(0..=h - p));
        let bx = rng.random_range(ax.saturating_sub(p - 1)..=(ax + p - 1).min(w - p));
        let by = rng.random_range(ay.saturating_sub(p - 1)..=(ay + p - 1).min(h - p));
        total += crop_pair_miou(image, backend, p, (ax, ay), (bx, by))?;
    }
    Ok(total / cfg.n_pairs as f64)
}

/// mIoU of two crops' predictions on their overlap.
pub fn crop_pair_miou(
    image: &ImageRgb,
    backend: &dyn SegmentationBackend,
    p: usize,
    a: (usize, usize),
    b: (usize, usize),
) -> Result<f64> {
    let pa = predict_labels(backend, &image.crop(a.0, a.1, p, p))?;
    let pb = predict_labels(backend, &image.crop(b.0, b.1, p, p))?;
    let (x0, y0) = (a.0.max(b.0), a.1.max(b.1));
    let (x1, y1) = ((a.0 + p).min(b.0 + p), (a.1 + p).min(b.1 + p));
    if x0 >= x1 || y0 >= y1 {
        return Err(Error::invalid("crops do not overlap"));
    }
    let mut la = Vec::with_capacity((x1 - x0) * (y1 - y0));
    let mut lb = Vec::with_capacity(la.capacity());
    for y in y0..y1 {
        for x in x0..x1 {
            la.push(pa.get(x - a.0, y - a.1));
            lb.push(pb.get(x - b.0, y - b.1));
        }
    }
    Ok(miou(&la, &lb))
}
