//! Patch-level Gaussian-Bernoulli RBM trained on road texture. Patches it
//! cannot reconstruct score as anomalous.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{read_json, write_json, Grid, ImageRgb, LabelSpec, Sample, ScoreMap};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbmConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub hidden_units: usize,
    /// Std of the Gaussian corruption applied to visibles, standardized units.
    pub noise_sigma: f64,
    pub cd_steps: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Name of the class whose pixels provide training patches.
    pub road_class: String,
}

impl Default for RbmConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            stride: 6,
            hidden_units: 20,
            noise_sigma: 0.1,
            cd_steps: 1,
            learning_rate: 0.005,
            epochs: 20,
            batch_size: 32,
            road_class: "road".into(),
        }
    }
}

impl RbmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.stride == 0 || self.hidden_units == 0 {
            return Err(Error::invalid("patch size, stride and hidden units must be at least 1"));
        }
        if self.cd_steps == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("cd steps, epochs and batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid(
                "learning rate must be positive and noise sigma non-negative",
            ));
        }
        Ok(())
    }

    pub fn visible_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Top-left offsets `0, stride, 2·stride, …` of patches fitting in `len`.
pub fn patch_offsets(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    if len < patch {
        return Vec::new();
    }
    (0..=len - patch).step_by(stride).collect()
}

fn patch_at(img: &ImageRgb, x0: usize, y0: usize, p: usize) -> Vec<f64> {
    let t = img.tensor();
    let mut v = Vec::with_capacity(3 * p * p);
    for c in 0..3 {
        let plane = t.plane(c);
        for y in y0..y0 + p {
            v.extend_from_slice(&plane[y * img.width() + x0..y * img.width() + x0 + p]);
        }
    }
    v
}

/// Every stride-aligned patch lying entirely on road-labelled pixels.
pub fn extract_road_patches(samples: &[Sample], spec: &LabelSpec, cfg: &RbmConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let road = spec
        .id_of(&cfg.road_class)
        .ok_or_else(|| Error::invalid(format!("label spec has no class named {:?}", cfg.road_class)))?;
    let p = cfg.patch_size;
    let mut any_road = false;
    let mut out = Vec::new();
    for s in samples {
        let sem = s
            .semantic
            .as_ref()
            .ok_or_else(|| Error::data(format!("sample {} has no semantic map", s.id)))?;
        s.validate()?;
        let (w, h) = s.dims();
        let labels = sem.labels();
        any_road |= labels.contains(&road);
        for y0 in patch_offsets(h, p, cfg.stride) {
            for x0 in patch_offsets(w, p, cfg.stride) {
                let all_road = (y0..y0 + p).all(|y| labels[y * w + x0..y * w + x0 + p].iter().all(|&l| l == road));
                if all_road {
                    out.push(patch_at(&s.image, x0, y0, p));
                }
            }
        }
    }
    if !any_road {
        return Err(Error::data("no road pixels in any sample"));
    }
    Ok(out)
}

/// Floor for per-channel standard deviations.
const STD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RbmMeta {
    config: RbmConfig,
    visible: usize,
    hidden: usize,
    channel_mean: [f64; 3],
    channel_std: [f64; 3],
}

/// Gaussian (unit variance) visibles, Bernoulli hiddens.
#[derive(Debug, Clone, PartialEq)]
pub struct RbmModel {
    cfg: RbmConfig,
    /// `visible × hidden`, row-major.
    weights: Vec<f64>,
    visible_bias: Vec<f64>,
    hidden_bias: Vec<f64>,
    channel_mean: [f64; 3],
    channel_std: [f64; 3],
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl RbmModel {
    pub fn config(&self) -> &RbmConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn standardization(&self) -> ([f64; 3], [f64; 3]) {
        (self.channel_mean, self.channel_std)
    }

    fn nv(&self) -> usize {
        self.visible_bias.len()
    }

    fn nh(&self) -> usize {
        self.hidden_bias.len()
    }

    pub fn standardize(&self, patch: &[f64]) -> Vec<f64> {
        let per = patch.len() / 3;
        patch
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / per;
                (v - self.channel_mean[c]) / self.channel_std[c]
            })
            .collect()
    }

    fn hidden_probs(&self, v: &[f64]) -> Vec<f64> {
        let nh = self.nh();
        let mut a = self.hidden_bias.clone();
        for (i, &vi) in v.iter().enumerate() {
            let row = &self.weights[i * nh..(i + 1) * nh];
            for j in 0..nh {
                a[j] += vi * row[j];
            }
        }
        a.into_iter().map(sigmoid).collect()
    }

    fn visible_mean(&self, h: &[f64]) -> Vec<f64> {
        let nh = self.nh();
        (0..self.nv())
            .map(|i| {
                let row = &self.weights[i * nh..(i + 1) * nh];
                self.visible_bias[i] + row.iter().zip(h).map(|(w, h)| w * h).sum::<f64>()
            })
            .collect()
    }

    /// One deterministic mean-field up-down pass on a standardized patch.
    pub fn reconstruct(&self, v: &[f64]) -> Vec<f64> {
        self.visible_mean(&self.hidden_probs(v))
    }

    /// Mean squared reconstruction error of a raw (unstandardized) patch.
    pub fn patch_error(&self, patch: &[f64]) -> f64 {
        let v = self.standardize(patch);
        let r = self.reconstruct(&v);
        v.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / v.len() as f64
    }

    fn all_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.visible_bias)
            .chain(&self.hidden_bias)
            .all(|v| v.is_finite())
    }

    /// Write `rbm.json` and `rbm_weights.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = RbmMeta {
            config: self.cfg.clone(),
            visible: self.nv(),
            hidden: self.nh(),
            channel_mean: self.channel_mean,
            channel_std: self.channel_std,
        };
        write_json(&meta, &dir.join("rbm.json"))?;
        let mut ps = ParamSet::new();
        ps.add("weights", vec![self.nv(), self.nh()], self.weights.clone());
        ps.add("visible_bias", vec![self.nv()], self.visible_bias.clone());
        ps.add("hidden_bias", vec![self.nh()], self.hidden_bias.clone());
        ps.save_blob(&dir.join("rbm_weights.bin"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: RbmMeta = read_json(&dir.join("rbm.json"))?;
        if meta.visible != meta.config.visible_dim() || meta.hidden != meta.config.hidden_units {
            return Err(Error::data("rbm.json dimensions disagree with its config"));
        }
        let mut ps = ParamSet::new();
        ps.add(
            "weights",
            vec![meta.visible, meta.hidden],
            vec![0.0; meta.visible * meta.hidden],
        );
        ps.add("visible_bias", vec![meta.visible], vec![0.0; meta.visible]);
        ps.add("hidden_bias", vec![meta.hidden], vec![0.0; meta.hidden]);
        ps.read_blob(&dir.join("rbm_weights.bin"))?;
        let take = |name: &str| ps.get(ps.id(name).expect("declared above")).data.clone();
        let model = Self {
            cfg: meta.config,
            weights: take("weights"),
            visible_bias: take("visible_bias"),
            hidden_bias: take("hidden_bias"),
            channel_mean: meta.channel_mean,
            channel_std: meta.channel_std,
        };
        if !model.all_finite() {
            return Err(Error::NonFinite("stored RBM parameters".into()));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RbmTraining {
    pub model: RbmModel,
    /// Mean clean-patch reconstruction error after each epoch.
    pub epoch_errors: Vec<f64>,
}

/// CD-k on noise-corrupted, per-channel standardized patches.
pub fn train_rbm<R: Rng + ?Sized>(patches: &[Vec<f64>], cfg: &RbmConfig, rng: &mut R) -> Result<RbmTraining> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::data("no training patches"));
    }
    let nv = cfg.visible_dim();
    if let Some(p) = patches.iter().find(|p| p.len() != nv) {
        return Err(Error::shape(format!("patch has {} values, expected {nv}", p.len())));
    }
    if patches.len() < cfg.hidden_units {
        return Err(Error::data(format!(
            "{} patches are fewer than the {} hidden units",
            patches.len(),
            cfg.hidden_units
        )));
    }
    let per = nv / 3;
    let mut mean = [0.0; 3];
    let mut sq = [0.0; 3];
    for p in patches {
        for c in 0..3 {
            for &v in &p[c * per..(c + 1) * per] {
                mean[c] += v;
                sq[c] += v * v;
            }
        }
    }
    let n = (patches.len() * per) as f64;
    let mut std = [0.0; 3];
    for c in 0..3 {
        mean[c] /= n;
        std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(STD_FLOOR);
    }

    let nh = cfg.hidden_units;
    let init = Normal::new(0.0, 0.01).expect("valid std");
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut model = RbmModel {
        cfg: cfg.clone(),
        weights: (0..nv * nh).map(|_| init.sample(rng)).collect(),
        visible_bias: vec![0.0; nv],
        hidden_bias: vec![0.0; nh],
        channel_mean: mean,
        channel_std: std,
    };
    let data: Vec<Vec<f64>> = patches.iter().map(|p| model.standardize(p)).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut errors = Vec::with_capacity(cfg.epochs);

    let mut dw = vec![0.0; nv * nh];
    let mut dvb = vec![0.0; nv];
    let mut dhb = vec![0.0; nh];
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            dw.iter_mut().for_each(|v| *v = 0.0);
            dvb.iter_mut().for_each(|v| *v = 0.0);
            dhb.iter_mut().for_each(|v| *v = 0.0);
            for &i in batch {
                let v0: Vec<f64> = if cfg.noise_sigma > 0.0 {
                    data[i].iter().map(|&v| v + noise.sample(rng)).collect()
                } else {
                    data[i].clone()
                };
                let h0 = model.hidden_probs(&v0);
                let mut hk = h0.clone();
                let mut vk = v0.clone();
                let mut hk_prob = h0.clone();
                for _ in 0..cfg.cd_steps {
                    for (s, &p) in hk.iter_mut().zip(&hk_prob) {
                        *s = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
                    }
                    vk = model.visible_mean(&hk);
                    hk_prob = model.hidden_probs(&vk);
                }
                for a in 0..nv {
                    let row = &mut dw[a * nh..(a + 1) * nh];
                    for j in 0..nh {
                        row[j] += v0[a] * h0[j] - vk[a] * hk_prob[j];
                    }
                    dvb[a] += v0[a] - vk[a];
                }
                for j in 0..nh {
                    dhb[j] += h0[j] - hk_prob[j];
                }
            }
            let scale = cfg.learning_rate / batch.len() as f64;
            model.weights.iter_mut().zip(&dw).for_each(|(w, d)| *w += scale * d);
            model
                .visible_bias
                .iter_mut()
                .zip(&dvb)
                .for_each(|(w, d)| *w += scale * d);
            model
                .hidden_bias
                .iter_mut()
                .zip(&dhb)
                .for_each(|(w, d)| *w += scale * d);
        }
        if !model.all_finite() {
            return Err(Error::NonFinite("RBM parameters diverged".into()));
        }
        let err = par::map(&data, |v| {
            let r = model.reconstruct(v);
            v.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / nv as f64
        });
        let mean_err = err.iter().sum::<f64>() / err.len() as f64;
        log::debug!("rbm epoch {} reconstruction mse {mean_err:.6}", errors.len() + 1);
        errors.push(mean_err);
    }
    Ok(RbmTraining {
        model,
        epoch_errors: errors,
    })
}

/// Spread per-patch scores over pixels: each pixel receives the mean score
/// of the patches covering it; uncovered pixels receive the maximum patch
/// score. `patch_scores` is row-major over the offset grid.
pub fn aggregate_patch_scores(
    width: usize,
    height: usize,
    patch: usize,
    stride: usize,
    patch_scores: &[f64],
) -> Result<ScoreMap> {
    let xs = patch_offsets(width, patch, stride);
    let ys = patch_offsets(height, patch, stride);
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::shape(format!(
            "{width}x{height} image is smaller than a {patch}px patch"
        )));
    }
    if patch_scores.len() != xs.len() * ys.len() {
        return Err(Error::shape("patch score count does not match the patch grid"));
    }
    let mut sum = vec![0.0; width * height];
    let mut cnt = vec![0u32; width * height];
    for (iy, &y0) in ys.iter().enumerate() {
        for (ix, &x0) in xs.iter().enumerate() {
            let s = patch_scores[iy * xs.len() + ix];
            for y in y0..y0 + patch {
                for x in x0..x0 + patch {
                    sum[y * width + x] += s;
                    cnt[y * width + x] += 1;
                }
            }
        }
    }
    let max = patch_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let v = sum
        .into_iter()
        .zip(cnt)
        .map(|(s, c)| if c == 0 { max } else { s / c as f64 })
        .collect();
    ScoreMap::new(Grid::from_vec(width, height, v)?)
}

/// Per-pixel anomaly score from patch reconstruction errors.
pub fn rbm_score(model: &RbmModel, image: &ImageRgb) -> Result<ScoreMap> {
    let (w, h) = image.dims();
    let (p, s) = (model.cfg.patch_size, model.cfg.stride);
    if w < p || h < p {
        return Err(Error::shape(format!("{w}x{h} image is smaller than a {p}px patch")));
    }
    let xs = patch_offsets(w, p, s);
    let ys = patch_offsets(h, p, s);
    let mut scores = Vec::with_capacity(xs.len() * ys.len());
    for &y0 in &ys {
        for &x0 in &xs {
            scores.push(model.patch_error(&patch_at(image, x0, y0, p)));
        }
    }
    aggregate_patch_scores(w, h, p, s, &scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{ClassDef, SemanticMap};
    use crate::rng::seeded;

    fn spec() -> LabelSpec {
        LabelSpec::new(
            vec![
                ClassDef::new("road", 0, false, [100, 100, 100]),
                ClassDef::new("car", 1, true, [200, 0, 0]),
            ],
            255,
        )
        .unwrap()
    }

    fn sample(w: usize, h: usize, label: impl Fn(usize, usize) -> u8) -> Sample {
        let mut s = Sample::new(
            "s",
            ImageRgb::from_fn(w, h, |x, y| [0.4 + 0.01 * ((x + y) % 3) as f64; 3]),
        );
        s.semantic = Some(SemanticMap::new(Grid::from_fn(w, h, label), &spec()).unwrap());
        s
    }

    #[test]
    fn patch_geometry() {
        let cfg = RbmConfig::default();
        assert_eq!(
            extract_road_patches(&[sample(8, 8, |_, _| 0)], &spec(), &cfg)
                .unwrap()
                .len(),
            1
        );
        assert_eq!(
            extract_road_patches(&[sample(14, 14, |_, _| 0)], &spec(), &cfg)
                .unwrap()
                .len(),
            4
        );
        assert_eq!(patch_offsets(14, 8, 6), vec![0, 6]);
        assert_eq!(patch_offsets(7, 8, 6), Vec::<usize>::new());
    }

    #[test]
    fn half_road_patches_avoid_other_pixels() {
        let cfg = RbmConfig::default();
        let s = sample(32, 20, |x, _| if x < 16 { 0 } else { 1 });
        let ps = extract_road_patches(&[s], &spec(), &cfg).unwrap();
        // x offsets 0 and 6 fit in the road half (6 + 8 = 14 <= 16), 12 does not
        assert_eq!(ps.len(), 2 * patch_offsets(20, 8, 6).len());
        let none = sample(16, 16, |_, _| 1);
        assert!(extract_road_patches(&[none], &spec(), &cfg).is_err());
    }

    #[test]
    fn aggregation_averages_covering_patches() {
        // 14x8: patches at x = 0 and 6 overlap on columns 6..8
        let m = aggregate_patch_scores(14, 8, 8, 6, &[1.0, 3.0]).unwrap();
        assert_eq!(*m.grid().get(0, 0), 1.0);
        assert_eq!(*m.grid().get(7, 3), 2.0);
        assert_eq!(*m.grid().get(13, 7), 3.0);
        // 15 wide: column 14 is not covered by any patch
        let m = aggregate_patch_scores(15, 8, 8, 6, &[1.0, 3.0]).unwrap();
        assert_eq!(*m.grid().get(14, 0), 3.0);
    }

    #[test]
    fn constant_corpus_reconstructs_constant_patch() {
        let cfg = RbmConfig::default();
        let patches = vec![vec![0.5; cfg.visible_dim()]; 64];
        let t = train_rbm(&patches, &cfg, &mut seeded(1)).unwrap();
        assert!(t.model.patch_error(&patches[0]) < 0.05);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let cfg = RbmConfig {
            epochs: 3,
            ..RbmConfig::default()
        };
        let mut rng = seeded(3);
        let patches: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..cfg.visible_dim()).map(|_| rng.random()).collect())
            .collect();
        let a = train_rbm(&patches, &cfg, &mut seeded(7)).unwrap();
        let b = train_rbm(&patches, &cfg, &mut seeded(7)).unwrap();
        assert_eq!(a, b);
        assert!(train_rbm(&[], &cfg, &mut seeded(7)).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = RbmConfig {
            epochs: 2,
            ..RbmConfig::default()
        };
        let mut rng = seeded(3);
        let patches: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..cfg.visible_dim()).map(|_| rng.random()).collect())
            .collect();
        let model = train_rbm(&patches, &cfg, &mut seeded(1)).unwrap().model;
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        assert_eq!(RbmModel::load(dir.path()).unwrap(), model);
    }
}
