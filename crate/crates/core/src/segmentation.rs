//! Segmentation backend contract, a small trainable reference segmenter,
//! and the two uncertainty baselines (MC dropout and ensembles).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::datamodel::{read_json, write_json, Grid, ImageRgb, LabelSpec, Sample, ScoreMap, SemanticMap};
use crate::error::{Error, Result};
use crate::nn::{
    add_grads, scale_grads, softmax_channels, weighted_cross_entropy, Adam, Graph, NodeId, ParamId, ParamSet, Tensor,
};
use crate::par;
use crate::rng::{derived, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Capabilities {
    /// Repeated forward passes may differ (dropout active at inference).
    pub stochastic_forward: bool,
    /// Gradients of logits with respect to the input image are available.
    pub gradient_access: bool,
}

/// Image → per-pixel class logits (`num_classes × H × W`).
pub trait SegmentationBackend: Send + Sync {
    fn label_spec(&self) -> &LabelSpec;

    fn capabilities(&self) -> Capabilities;

    /// Deterministic logits.
    fn predict_logits(&self, image: &ImageRgb) -> Result<Tensor>;

    /// One stochastic forward pass.
    fn sample_logits(&self, _image: &ImageRgb, _rng: &mut dyn RngCore) -> Result<Tensor> {
        Err(Error::Capability("backend has no stochastic forward pass".into()))
    }

    /// Vector-Jacobian product: gradient of `<dlogits, logits(image)>` with
    /// respect to the image (`3 × H × W`).
    fn input_gradient(&self, _image: &ImageRgb, _dlogits: &Tensor) -> Result<Tensor> {
        Err(Error::Capability("backend exposes no input gradients".into()))
    }
}

/// Per-pixel argmax over channels; ties go to the lowest class index.
pub fn argmax_labels(logits: &Tensor) -> SemanticMap {
    let (c, h, w) = logits.dims();
    let n = h * w;
    let d = logits.data();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for ch in 1..c {
                if d[ch * n + i] > d[best * n + i] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect();
    SemanticMap::from_grid_unchecked(Grid::from_vec(w, h, labels).expect("sized"))
}

pub fn predict_labels(backend: &dyn SegmentationBackend, image: &ImageRgb) -> Result<SemanticMap> {
    let logits = backend.predict_logits(image)?;
    check_logits(&logits, backend, image)?;
    Ok(argmax_labels(&logits))
}

fn check_logits(logits: &Tensor, backend: &dyn SegmentationBackend, image: &ImageRgb) -> Result<()> {
    if logits.channels() != backend.label_spec().num_classes()
        || logits.width() != image.width()
        || logits.height() != image.height()
    {
        return Err(Error::shape("backend logits do not match the image and label set"));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("segmentation logits".into()));
    }
    Ok(())
}

/// Mean over classes of the population variance of each class probability
/// across samples.
pub fn probability_variance(samples: &[Tensor]) -> Result<ScoreMap> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("variance needs at least one sample"))?;
    let (c, h, w) = first.dims();
    if samples.iter().any(|s| s.dims() != (c, h, w)) {
        return Err(Error::shape("probability samples differ in shape"));
    }
    let n = h * w;
    let k = samples.len() as f64;
    let mut score = vec![0.0; n];
    for ch in 0..c {
        for (i, sc) in score.iter_mut().enumerate() {
            let mean = samples.iter().map(|s| s.data()[ch * n + i]).sum::<f64>() / k;
            let var = samples
                .iter()
                .map(|s| {
                    let d = s.data()[ch * n + i] - mean;
                    d * d
                })
                .sum::<f64>()
                / k;
            *sc += var;
        }
    }
    score.iter_mut().for_each(|v| *v = (*v / c as f64).max(0.0));
    ScoreMap::new(Grid::from_vec(w, h, score)?)
}

pub const DEFAULT_MC_SAMPLES: usize = 16;

/// Variance of softmax outputs over `n_samples` stochastic passes.
pub fn mc_dropout_uncertainty(
    backend: &dyn SegmentationBackend,
    image: &ImageRgb,
    n_samples: usize,
    rng: &mut dyn RngCore,
) -> Result<ScoreMap> {
    if !backend.capabilities().stochastic_forward {
        return Err(Error::Capability(
            "MC-dropout uncertainty needs a backend with a stochastic forward pass".into(),
        ));
    }
    if n_samples < 2 {
        return Err(Error::invalid("MC-dropout uncertainty needs at least 2 samples"));
    }
    let mut probs = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let logits = backend.sample_logits(image, rng)?;
        check_logits(&logits, backend, image)?;
        probs.push(softmax_channels(&logits));
    }
    probability_variance(&probs)
}

/// Variance of softmax outputs across ensemble members.
pub fn ensemble_uncertainty(backends: &[&dyn SegmentationBackend], image: &ImageRgb) -> Result<ScoreMap> {
    if backends.len() < 2 {
        return Err(Error::invalid(format!(
            "ensemble uncertainty needs at least 2 members, got {}",
            backends.len()
        )));
    }
    let spec = backends[0].label_spec();
    if backends.iter().any(|b| b.label_spec() != spec) {
        return Err(Error::invalid("ensemble members use different label specifications"));
    }
    let mut probs = Vec::with_capacity(backends.len());
    for b in backends {
        let logits = b.predict_logits(image)?;
        check_logits(&logits, *b, image)?;
        probs.push(softmax_channels(&logits));
    }
    probability_variance(&probs)
}

/// Architecture of the reference segmenter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySegmenterConfig {
    pub hidden: usize,
    /// Drop probability applied before the classifier; 0 disables dropout.
    pub dropout: f64,
}

impl Default for ToySegmenterConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            dropout: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.01,
            batch_size: 4,
            seed: 0,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SegmenterDescriptor {
    label_spec: LabelSpec,
    config: ToySegmenterConfig,
}

/// Two 3×3 convolutions with ReLU, optional dropout, 1×1 classifier.
#[derive(Debug, Clone)]
pub struct ToySegmenter {
    spec: LabelSpec,
    cfg: ToySegmenterConfig,
    params: ParamSet,
    layers: [(ParamId, ParamId); 3],
}

impl ToySegmenter {
    pub fn new(spec: LabelSpec, cfg: ToySegmenterConfig, seed: u64) -> Result<Self> {
        if cfg.hidden == 0 {
            return Err(Error::invalid("segmenter needs at least one hidden channel"));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::invalid(format!("dropout {} must lie in [0, 1)", cfg.dropout)));
        }
        let mut rng = seeded(seed);
        let mut params = ParamSet::new();
        let l1 = params.add_conv("conv1", 3, cfg.hidden, 3, 2.0, &mut rng);
        let l2 = params.add_conv("conv2", cfg.hidden, cfg.hidden, 3, 2.0, &mut rng);
        let l3 = params.add_conv("classifier", cfg.hidden, spec.num_classes(), 1, 1.0, &mut rng);
        Ok(Self {
            spec,
            cfg,
            params,
            layers: [l1, l2, l3],
        })
    }

    pub fn config(&self) -> &ToySegmenterConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn build(&self, g: &mut Graph, x: NodeId, dropout_rng: Option<&mut dyn RngCore>) -> NodeId {
        let [(w1, b1), (w2, b2), (w3, b3)] = self.layers;
        let h = g.conv(x, w1, Some(b1), 1, 1);
        let h = g.relu(h);
        let h = g.conv(h, w2, Some(b2), 1, 1);
        let mut h = g.relu(h);
        if let Some(rng) = dropout_rng {
            if self.cfg.dropout > 0.0 {
                h = g.dropout(h, self.cfg.dropout, rng);
            }
        }
        g.conv(h, w3, Some(b3), 1, 0)
    }

    fn sample_loss(&self, sample: &Sample, seed: u64) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let sem = sample
            .semantic
            .as_ref()
            .ok_or_else(|| Error::data(format!("sample {} has no semantic map", sample.id)))?;
        let mut rng = seeded(seed);
        let mut g = Graph::new(&self.params);
        let x = g.input(sample.image.tensor().clone());
        let out = self.build(&mut g, x, Some(&mut rng));
        let weights = vec![1.0; self.spec.num_classes()];
        let (loss, dlogits, _) = weighted_cross_entropy(g.value(out), sem.labels(), &weights);
        Ok((loss, g.backward(out, dlogits).into_param_grads()))
    }

    /// Fit on ground-truth semantic maps with Adam. Returns per-epoch mean loss.
    pub fn train(&mut self, samples: &[Sample], cfg: &SegTrainConfig) -> Result<Vec<f64>> {
        if samples.is_empty() {
            return Err(Error::data("no samples to train the segmenter on"));
        }
        if cfg.batch_size == 0 || cfg.epochs == 0 {
            return Err(Error::invalid(
                "segmenter training needs epochs and batch size of at least 1",
            ));
        }
        let mut opt = Adam::new(&self.params, cfg.learning_rate);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng = derived(cfg.seed, 0);
        let mut history = Vec::with_capacity(cfg.epochs);
        let mut step = 0u64;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut shuffle_rng);
            let mut total = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                step += 1;
                let jobs: Vec<(usize, u64)> = batch
                    .iter()
                    .enumerate()
                    .map(|(j, &i)| (i, crate::rng::derive_seed(cfg.seed, step * 1024 + j as u64 + 1)))
                    .collect();
                let results = par::try_map(&jobs, |&(i, s)| self.sample_loss(&samples[i], s))?;
                let mut grads = Vec::new();
                for (loss, g) in results {
                    total += loss;
                    add_grads(&mut grads, g);
                }
                scale_grads(&mut grads, 1.0 / batch.len() as f64);
                opt.step(&mut self.params, &grads);
            }
            history.push(total / samples.len() as f64);
        }
        if !self.params.all_finite() {
            return Err(Error::NonFinite("segmenter weights after training".into()));
        }
        Ok(history)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(
            &SegmenterDescriptor {
                label_spec: self.spec.clone(),
                config: self.cfg.clone(),
            },
            &dir.join("segmenter.json"),
        )?;
        self.params.save_blob(&dir.join("weights.bin"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let d: SegmenterDescriptor = read_json(&dir.join("segmenter.json"))?;
        let mut s = Self::new(d.label_spec, d.config, 0)?;
        s.params.read_blob(&dir.join("weights.bin"))?;
        Ok(s)
    }
}

impl SegmentationBackend for ToySegmenter {
    fn label_spec(&self) -> &LabelSpec {
        &self.spec
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            stochastic_forward: self.cfg.dropout > 0.0,
            gradient_access: true,
        }
    }

    fn predict_logits(&self, image: &ImageRgb) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let x = g.input(image.tensor().clone());
        let out = self.build(&mut g, x, None);
        Ok(g.value(out).clone())
    }

    fn sample_logits(&self, image: &ImageRgb, rng: &mut dyn RngCore) -> Result<Tensor> {
        if self.cfg.dropout <= 0.0 {
            return Err(Error::Capability("segmenter was built without dropout".into()));
        }
        let mut g = Graph::new(&self.params);
        let x = g.input(image.tensor().clone());
        let out = self.build(&mut g, x, Some(rng));
        Ok(g.value(out).clone())
    }

    fn input_gradient(&self, image: &ImageRgb, dlogits: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let x = g.input_with_grad(image.tensor().clone());
        let out = self.build(&mut g, x, None);
        if g.value(out).dims() != dlogits.dims() {
            return Err(Error::shape("upstream gradient does not match the logits"));
        }
        let grads = g.backward(out, dlogits.clone());
        Ok(grads
            .input(x)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(3, image.height(), image.width())))
    }
}

/// Backend returning fixed logits regardless of the input; handy for tests
/// and for replaying logits exported from external networks.
#[derive(Debug, Clone)]
pub struct FixedLogits {
    pub spec: LabelSpec,
    pub logits: Tensor,
}

impl SegmentationBackend for FixedLogits {
    fn label_spec(&self) -> &LabelSpec {
        &self.spec
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }

    fn predict_logits(&self, image: &ImageRgb) -> Result<Tensor> {
        if self.logits.width() != image.width() || self.logits.height() != image.height() {
            return Err(Error::shape("fixed logits do not match the image size"));
        }
        Ok(self.logits.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::ClassDef;

    fn spec(n: usize) -> LabelSpec {
        let classes = (0..n)
            .map(|i| ClassDef::new(&format!("c{i}"), i as u8, i == n - 1, [i as u8 * 40, 100, 50]))
            .collect();
        LabelSpec::new(classes, 255).unwrap()
    }

    #[test]
    fn argmax_and_tie_break() {
        let logits = Tensor::from_vec(3, 1, 2, vec![0.0, 1.0, 5.0, 0.0, 0.0, 1.0]).unwrap();
        let m = argmax_labels(&logits);
        assert_eq!(m.labels(), &[1, 0]);
        let tie = Tensor::from_vec(3, 1, 1, vec![2.0, -1.0, 2.0]).unwrap();
        assert_eq!(argmax_labels(&tie).labels(), &[0]);
        let fixed = FixedLogits {
            spec: spec(3),
            logits: Tensor::from_vec(3, 2, 2, [vec![0.0; 4], vec![3.0; 4], vec![1.0; 4]].concat()).unwrap(),
        };
        let m = predict_labels(&fixed, &ImageRgb::new(2, 2)).unwrap();
        assert!(m.labels().iter().all(|&l| l == 1));
    }

    #[test]
    fn hand_computed_variance() {
        let a = Tensor::from_vec(2, 1, 1, vec![1.0, 0.0]).unwrap();
        let b = Tensor::from_vec(2, 1, 1, vec![0.0, 1.0]).unwrap();
        let v = probability_variance(&[a.clone(), b]).unwrap();
        assert!((v.scores()[0] - 0.25).abs() < 1e-15);
        let z = probability_variance(&[a.clone(), a]).unwrap();
        assert_eq!(z.scores()[0], 0.0);
    }

    #[test]
    fn ensemble_preconditions() {
        let s = spec(2);
        let mk = |l: Vec<f64>| FixedLogits {
            spec: s.clone(),
            logits: Tensor::from_vec(2, 1, 1, l).unwrap(),
        };
        let a = mk(vec![50.0, -50.0]);
        let b = mk(vec![-50.0, 50.0]);
        let img = ImageRgb::new(1, 1);
        let v = ensemble_uncertainty(&[&a, &b], &img).unwrap();
        assert!((v.scores()[0] - 0.25).abs() < 1e-12);
        assert_eq!(ensemble_uncertainty(&[&a, &a], &img).unwrap().scores()[0], 0.0);
        assert!(ensemble_uncertainty(&[&a], &img).is_err());
        let other = FixedLogits {
            spec: spec(3),
            logits: Tensor::zeros(3, 1, 1),
        };
        assert!(ensemble_uncertainty(&[&a, &other], &img).is_err());
        let mut rng = seeded(0);
        assert!(matches!(
            mc_dropout_uncertainty(&a, &img, 4, &mut rng),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn dropout_sampling_is_finite_and_nonnegative() {
        let seg = ToySegmenter::new(
            spec(3),
            ToySegmenterConfig {
                hidden: 6,
                dropout: 0.5,
            },
            1,
        )
        .unwrap();
        let img = ImageRgb::from_fn(12, 10, |x, y| [x as f64 / 12.0, y as f64 / 10.0, 0.3]);
        let mut rng = seeded(2);
        let s = mc_dropout_uncertainty(&seg, &img, 16, &mut rng).unwrap();
        assert!(s.scores().iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(mc_dropout_uncertainty(&seg, &img, 1, &mut rng).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let seg = ToySegmenter::new(spec(3), ToySegmenterConfig::default(), 4).unwrap();
        let img = ImageRgb::from_fn(5, 4, |x, y| [0.2 + 0.1 * x as f64, 0.5, 0.1 * y as f64 + 0.3]);
        let mut up = Tensor::zeros(3, 4, 5);
        for (i, v) in up.data_mut().iter_mut().enumerate() {
            *v = ((i * 7) % 5) as f64 - 2.0;
        }
        let g = seg.input_gradient(&img, &up).unwrap();
        let f = |im: &ImageRgb| -> f64 {
            let l = seg.predict_logits(im).unwrap();
            l.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for i in [0usize, 7, 23, 41, 59] {
            let mut p = img.tensor().clone();
            p.data_mut()[i] += eps;
            let mut m = img.tensor().clone();
            m.data_mut()[i] -= eps;
            let fd = (f(&ImageRgb::from_tensor(p).unwrap()) - f(&ImageRgb::from_tensor(m).unwrap())) / (2.0 * eps);
            assert!((fd - g.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let seg = ToySegmenter::new(spec(3), ToySegmenterConfig::default(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        seg.save(dir.path()).unwrap();
        let back = ToySegmenter::load(dir.path()).unwrap();
        let img = ImageRgb::from_fn(6, 6, |x, _| [x as f64 / 6.0, 0.2, 0.9]);
        assert_eq!(seg.predict_logits(&img).unwrap(), back.predict_logits(&img).unwrap());
    }
}
