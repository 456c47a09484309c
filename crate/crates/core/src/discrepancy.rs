//! The discrepancy network: three feature streams (real image, resynthesized
//! image, one-hot labels), per-level fusion with a pointwise feature
//! correlation, and a SELU up-convolution decoder producing a per-pixel
//! two-class (no discrepancy / discrepancy) output.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datamodel::{one_hot, read_json, write_json, AnomalyMask, Grid, ImageRgb, LabelSpec, ScoreMap, SemanticMap};
use crate::error::{Error, Result};
use crate::nn::{
    add_grads, scale_grads, softmax_channels, weighted_cross_entropy, Adam, CorrelationMode, Graph, NodeId, ParamId,
    ParamSet, Tensor,
};
use crate::par;
use crate::rng::{derived, seeded};
use crate::synthesis::TrainingPair;

pub use crate::nn::CorrelationMode as Correlation;

/// Output channel of the discrepancy class.
pub const DISCREPANCY_CLASS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// VGG16 convolutional topology; weights come from a checkpoint.
    Vgg16,
    /// Small desk-scale pyramid.
    Toy,
}

/// Convolutional feature pyramid shared by the two image streams.
///
/// Stage `l` applies a 2×2 max pool (for `l > 0`) followed by one 3×3
/// convolution + ReLU per entry of `stages[l]`; its output is pyramid
/// level `l`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub kind: ExtractorKind,
    pub stages: Vec<Vec<usize>>,
}

impl ExtractorSpec {
    pub fn vgg16() -> Self {
        Self {
            kind: ExtractorKind::Vgg16,
            stages: vec![
                vec![64, 64],
                vec![128, 128],
                vec![256, 256, 256],
                vec![512, 512, 512],
                vec![512, 512, 512],
            ],
        }
    }

    pub fn toy(stages: Vec<Vec<usize>>) -> Self {
        Self {
            kind: ExtractorKind::Toy,
            stages,
        }
    }

    pub fn out_channels(&self, level: usize) -> usize {
        *self.stages[level].last().expect("validated non-empty stage")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyConfig {
    pub extractor: ExtractorSpec,
    /// Label-stream channels per pyramid level.
    pub label_channels: Vec<usize>,
    /// Channels after the 1×1 fusion projection, per level.
    pub reduce_channels: Vec<usize>,
    /// Decoder channels per level.
    pub upconv_channels: Vec<usize>,
    /// Number of semantic classes in the one-hot label input.
    pub num_label_classes: usize,
    pub num_output_classes: usize,
    #[serde(default)]
    pub correlation: CorrelationMode,
    /// Keep the image feature extractor fixed during training.
    pub freeze_extractor: bool,
}

impl DiscrepancyConfig {
    /// VGG16 image streams with the channel plan used for full-size inputs.
    pub fn vgg16(num_label_classes: usize) -> Self {
        Self {
            extractor: ExtractorSpec::vgg16(),
            label_channels: vec![32, 64, 128, 256, 256],
            reduce_channels: vec![32, 64, 128, 256, 256],
            upconv_channels: vec![32, 64, 128, 256, 256],
            num_label_classes,
            num_output_classes: 2,
            correlation: CorrelationMode::Cosine,
            freeze_extractor: true,
        }
    }

    /// Three-level desk-scale network.
    pub fn toy(num_label_classes: usize) -> Self {
        Self {
            extractor: ExtractorSpec::toy(vec![vec![8], vec![16], vec![16]]),
            label_channels: vec![4, 8, 8],
            reduce_channels: vec![4, 8, 8],
            upconv_channels: vec![8, 8, 16],
            num_label_classes,
            num_output_classes: 2,
            correlation: CorrelationMode::Cosine,
            freeze_extractor: false,
        }
    }

    pub fn pyramid_levels(&self) -> usize {
        self.extractor.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.pyramid_levels();
        if l < 2 {
            return Err(Error::invalid("the discrepancy pyramid needs at least 2 levels"));
        }
        for (name, len) in [
            ("label_channels", self.label_channels.len()),
            ("reduce_channels", self.reduce_channels.len()),
            ("upconv_channels", self.upconv_channels.len()),
        ] {
            if len != l {
                return Err(Error::invalid(format!("{name} has {len} entries, expected {l}")));
            }
        }
        if self.extractor.stages.iter().any(|s| s.is_empty() || s.contains(&0))
            || [&self.label_channels, &self.reduce_channels, &self.upconv_channels]
                .iter()
                .any(|v| v.contains(&0))
        {
            return Err(Error::invalid("every stage needs at least one non-empty layer"));
        }
        if self.num_label_classes == 0 {
            return Err(Error::invalid("num_label_classes must be positive"));
        }
        if self.num_output_classes != 2 {
            return Err(Error::invalid("the discrepancy head is two-class"));
        }
        Ok(())
    }

    /// Smallest input side accepted (one pixel at the coarsest level).
    pub fn min_input_side(&self) -> usize {
        1 << (self.pyramid_levels() - 1)
    }
}

/// Pointwise cosine similarity of two `D × H × W` feature maps (zero
/// vectors → 0), returned as `1 × H × W`.
pub fn pointwise_correlation(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "correlation operands {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(crate::nn::correlation_forward(a, b, CorrelationMode::Cosine))
}

/// Graph fragment shared by [`FusionLayer`] and the network: concatenate
/// the three streams, project with a 1×1 convolution, append the
/// real/resynth correlation channel.
fn fuse_nodes(
    g: &mut Graph,
    real: NodeId,
    resynth: NodeId,
    label: NodeId,
    proj: (ParamId, ParamId),
    mode: CorrelationMode,
) -> NodeId {
    let cat = g.concat(&[real, resynth, label]);
    let reduced = g.conv(cat, proj.0, Some(proj.1), 1, 0);
    let corr = g.correlation(real, resynth, mode);
    g.concat(&[reduced, corr])
}

/// Standalone fusion step with its own projection weights.
#[derive(Debug, Clone)]
pub struct FusionLayer {
    params: ParamSet,
    proj: (ParamId, ParamId),
    in_channels: usize,
    reduce_to: usize,
    mode: CorrelationMode,
}

impl FusionLayer {
    pub fn new(in_channels: usize, reduce_to: usize, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let proj = params.add_conv("fuse", in_channels, reduce_to, 1, 1.0, &mut seeded(seed));
        Self {
            params,
            proj,
            in_channels,
            reduce_to,
            mode: CorrelationMode::Cosine,
        }
    }

    pub fn zeroed(in_channels: usize, reduce_to: usize) -> Self {
        let mut f = Self::new(in_channels, reduce_to, 0);
        for p in f.params.iter_mut() {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        f
    }

    pub fn reduce_to(&self) -> usize {
        self.reduce_to
    }

    /// Output has `reduce_to + 1` channels at the input resolution.
    pub fn apply(&self, real: &Tensor, resynth: &Tensor, label: &Tensor) -> Result<Tensor> {
        if !real.same_spatial(resynth) || !real.same_spatial(label) {
            return Err(Error::shape("fusion inputs differ in resolution"));
        }
        if real.channels() != resynth.channels() {
            return Err(Error::shape("real and resynthesized features differ in depth"));
        }
        let cin = real.channels() + resynth.channels() + label.channels();
        if cin != self.in_channels {
            return Err(Error::shape(format!(
                "fusion expects {} input channels, got {cin}",
                self.in_channels
            )));
        }
        let mut g = Graph::new(&self.params);
        let (a, b, c) = (g.input(real.clone()), g.input(resynth.clone()), g.input(label.clone()));
        let out = fuse_nodes(&mut g, a, b, c, self.proj, self.mode);
        Ok(g.value(out).clone())
    }
}

/// Convenience wrapper of [`FusionLayer`] for a fresh random projection.
pub fn fuse_level(real: &Tensor, resynth: &Tensor, label: &Tensor, reduce_to: usize, seed: u64) -> Result<Tensor> {
    let cin = real.channels() + resynth.channels() + label.channels();
    FusionLayer::new(cin, reduce_to, seed).apply(real, resynth, label)
}

struct Layout {
    extractor: Vec<Vec<(ParamId, ParamId)>>,
    label: Vec<(ParamId, ParamId)>,
    fuse: Vec<(ParamId, ParamId)>,
    decoder: Vec<(ParamId, ParamId)>,
    head: (ParamId, ParamId),
}

/// Prepared network inputs for one sample.
#[derive(Debug, Clone)]
pub struct NetInput {
    pub image: Tensor,
    pub resynth: Tensor,
    pub labels: Tensor,
}

impl NetInput {
    pub fn new(image: &ImageRgb, resynth: &ImageRgb, sem: &SemanticMap, spec: &LabelSpec) -> Result<Self> {
        Ok(Self {
            image: image.tensor().clone(),
            resynth: resynth.tensor().clone(),
            labels: one_hot(sem, spec)?,
        })
    }
}

pub struct DiscrepancyNet {
    cfg: DiscrepancyConfig,
    params: ParamSet,
    layout: Layout,
}

const SELU_GAIN: f64 = 1.0;
const RELU_GAIN: f64 = 2.0;

impl DiscrepancyNet {
    pub fn new(cfg: DiscrepancyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(seed);
        let mut params = ParamSet::new();
        let levels = cfg.pyramid_levels();

        let mut extractor = Vec::with_capacity(levels);
        let mut cin = 3;
        for (l, stage) in cfg.extractor.stages.iter().enumerate() {
            let mut convs = Vec::with_capacity(stage.len());
            for (j, &cout) in stage.iter().enumerate() {
                convs.push(params.add_conv(&format!("extractor.s{l}.c{j}"), cin, cout, 3, RELU_GAIN, &mut rng));
                cin = cout;
            }
            extractor.push(convs);
        }

        let mut label = Vec::with_capacity(levels);
        let mut cin = cfg.num_label_classes;
        for (l, &cout) in cfg.label_channels.iter().enumerate() {
            label.push(params.add_conv(&format!("labels.s{l}"), cin, cout, 3, RELU_GAIN, &mut rng));
            cin = cout;
        }

        let fuse = (0..levels)
            .map(|l| {
                let cin = 2 * cfg.extractor.out_channels(l) + cfg.label_channels[l];
                params.add_conv(&format!("fuse.l{l}"), cin, cfg.reduce_channels[l], 1, 1.0, &mut rng)
            })
            .collect::<Vec<_>>();

        let mut decoder = vec![None; levels];
        let top = levels - 1;
        decoder[top] = Some(params.add_conv(
            &format!("decoder.l{top}"),
            cfg.reduce_channels[top] + 1,
            cfg.upconv_channels[top],
            3,
            SELU_GAIN,
            &mut rng,
        ));
        for l in (0..top).rev() {
            let cin = cfg.upconv_channels[l + 1] + cfg.reduce_channels[l] + 1;
            decoder[l] = Some(params.add_conv(
                &format!("decoder.l{l}"),
                cin,
                cfg.upconv_channels[l],
                3,
                SELU_GAIN,
                &mut rng,
            ));
        }
        let head = params.add_conv("head", cfg.upconv_channels[0], cfg.num_output_classes, 1, 1.0, &mut rng);

        if cfg.freeze_extractor {
            params.set_trainable_prefix("extractor.", false);
        }
        Ok(Self {
            layout: Layout {
                extractor,
                label,
                fuse,
                decoder: decoder.into_iter().map(|d| d.expect("filled")).collect(),
                head,
            },
            cfg,
            params,
        })
    }

    pub fn config(&self) -> &DiscrepancyConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_input(&self, input: &NetInput) -> Result<()> {
        let (c, h, w) = input.image.dims();
        if c != 3 || input.resynth.dims() != (3, h, w) {
            return Err(Error::shape(
                "image and resynthesis must be 3-channel and equally sized",
            ));
        }
        if input.labels.dims() != (self.cfg.num_label_classes, h, w) {
            return Err(Error::shape(format!(
                "label input is {:?}, expected ({}, {h}, {w})",
                input.labels.dims(),
                self.cfg.num_label_classes
            )));
        }
        let min = self.cfg.min_input_side();
        if h < min || w < min {
            return Err(Error::shape(format!("inputs must be at least {min}x{min}")));
        }
        Ok(())
    }

    fn extract(&self, g: &mut Graph, x: NodeId) -> Vec<NodeId> {
        let mut levels = Vec::with_capacity(self.layout.extractor.len());
        let mut h = x;
        for (l, convs) in self.layout.extractor.iter().enumerate() {
            if l > 0 {
                h = g.max_pool2(h);
            }
            for &(w, b) in convs {
                h = g.conv(h, w, Some(b), 1, 1);
                h = g.relu(h);
            }
            levels.push(h);
        }
        levels
    }

    /// Record the forward pass; returns the logits node.
    fn build(&self, g: &mut Graph, input: &NetInput) -> NodeId {
        let real_in = g.input(input.image.clone());
        let syn_in = g.input(input.resynth.clone());
        let lab_in = g.input(input.labels.clone());
        let real = self.extract(g, real_in);
        let syn = self.extract(g, syn_in);

        let mut label = Vec::with_capacity(real.len());
        let mut h = lab_in;
        for (l, &(w, b)) in self.layout.label.iter().enumerate() {
            if l > 0 {
                h = g.max_pool2(h);
            }
            h = g.conv(h, w, Some(b), 1, 1);
            h = g.relu(h);
            label.push(h);
        }

        let fused: Vec<NodeId> = (0..real.len())
            .map(|l| fuse_nodes(g, real[l], syn[l], label[l], self.layout.fuse[l], self.cfg.correlation))
            .collect();

        let top = fused.len() - 1;
        let (w, b) = self.layout.decoder[top];
        let x = g.conv(fused[top], w, Some(b), 1, 1);
        let mut x = g.selu(x);
        for l in (0..top).rev() {
            let (fh, fw) = (g.value(fused[l]).height(), g.value(fused[l]).width());
            let up = g.upsample_to(x, fh, fw);
            let cat = g.concat(&[up, fused[l]]);
            let (w, b) = self.layout.decoder[l];
            let y = g.conv(cat, w, Some(b), 1, 1);
            x = g.selu(y);
        }
        g.conv(x, self.layout.head.0, Some(self.layout.head.1), 1, 0)
    }

    /// Raw two-channel logits.
    pub fn logits(&self, input: &NetInput) -> Result<Tensor> {
        self.check_input(input)?;
        let mut g = Graph::new(&self.params);
        let out = self.build(&mut g, input);
        let v = g.value(out);
        if !v.all_finite() {
            return Err(Error::NonFinite("discrepancy logits".into()));
        }
        Ok(v.clone())
    }

    /// Per-pixel probability of the discrepancy class.
    pub fn forward(&self, input: &NetInput) -> Result<ScoreMap> {
        let logits = self.logits(input)?;
        let probs = softmax_channels(&logits);
        let (_, h, w) = probs.dims();
        ScoreMap::new(Grid::from_vec(w, h, probs.plane(DISCREPANCY_CLASS).to_vec())?)
    }

    /// Score an image against its resynthesis from `sem`.
    pub fn score(&self, image: &ImageRgb, resynth: &ImageRgb, sem: &SemanticMap, spec: &LabelSpec) -> Result<ScoreMap> {
        self.forward(&NetInput::new(image, resynth, sem, spec)?)
    }

    /// Weighted cross-entropy loss of one sample and its parameter gradients.
    /// `targets` uses the anomaly-mask encoding (IGNORE pixels skipped).
    pub fn loss_and_gradients(
        &self,
        input: &NetInput,
        targets: &[u8],
        class_weights: &[f64],
    ) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        self.check_input(input)?;
        let mut g = Graph::new(&self.params);
        let out = self.build(&mut g, input);
        if !g.value(out).all_finite() {
            return Err(Error::NonFinite("discrepancy logits".into()));
        }
        let (loss, dlogits, _) = weighted_cross_entropy(g.value(out), targets, class_weights);
        Ok((loss, g.backward(out, dlogits).into_param_grads()))
    }

    pub fn loss(&self, input: &NetInput, targets: &[u8], class_weights: &[f64]) -> Result<f64> {
        let logits = self.logits(input)?;
        Ok(weighted_cross_entropy(&logits, targets, class_weights).0)
    }

    /// Write `architecture.json` and `weights.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&self.cfg, &dir.join("architecture.json"))?;
        self.params.save_blob(&dir.join("weights.bin"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: DiscrepancyConfig = read_json(&dir.join("architecture.json"))?;
        let mut net = Self::new(cfg, 0)?;
        net.params.read_blob(&dir.join("weights.bin"))?;
        Ok(net)
    }
}

/// Default offset of the logarithmic class-weighting formula.
pub const DEFAULT_WEIGHT_CONSTANT: f64 = 1.02;

/// Per-class weights `1 / ln(c + p_k)` from class pixel fractions.
pub fn class_weights(fractions: &[f64], c: f64) -> Result<Vec<f64>> {
    if fractions.is_empty() {
        return Err(Error::invalid("class weights need at least one class"));
    }
    if fractions.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("class fractions must lie in [0, 1]"));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("class fractions sum to {sum}, not 1")));
    }
    fractions
        .iter()
        .map(|&p| {
            let arg = c + p;
            if arg <= 1.0 {
                Err(Error::invalid(format!(
                    "weighting constant {c} with fraction {p} gives a non-positive logarithm"
                )))
            } else {
                Ok(1.0 / arg.ln())
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_weight_constant")]
    pub weight_constant: f64,
}

fn default_weight_constant() -> f64 {
    DEFAULT_WEIGHT_CONSTANT
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-4,
            batch_size: 4,
            seed: 0,
            weight_constant: DEFAULT_WEIGHT_CONSTANT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub class_weights: Vec<f64>,
}

impl TrainReport {
    /// `epoch,mean_loss` rows, epochs counted from 1.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss\n");
        for (i, l) in self.epoch_losses.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, l));
        }
        s
    }
}

/// A pair converted to network inputs plus its target row.
pub struct PreparedPair {
    pub input: NetInput,
    pub targets: Vec<u8>,
}

pub fn prepare_pairs(pairs: &[TrainingPair], spec: &LabelSpec) -> Result<Vec<PreparedPair>> {
    par::try_map(pairs, |p| {
        Ok(PreparedPair {
            input: NetInput::new(&p.image, &p.resynth, &p.altered_sem, spec)?,
            targets: p.target.values().to_vec(),
        })
    })
}

/// Fractions of (no-discrepancy, discrepancy) among non-ignored target pixels.
pub fn target_fractions(pairs: &[PreparedPair]) -> Result<[f64; 2]> {
    let (mut neg, mut pos) = (0usize, 0usize);
    for p in pairs {
        for &t in &p.targets {
            match t {
                AnomalyMask::NORMAL => neg += 1,
                AnomalyMask::ANOMALY => pos += 1,
                _ => {}
            }
        }
    }
    let total = neg + pos;
    if total == 0 {
        return Err(Error::data("every target pixel is IGNORE"));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::data(format!(
            "training targets contain only one class ({pos} discrepancy, {neg} normal pixels)"
        )));
    }
    Ok([neg as f64 / total as f64, pos as f64 / total as f64])
}

/// Train with Adam on class-weighted per-pixel cross-entropy.
///
/// Each epoch visits the pairs in a seeded random order; per-sample gradients
/// of a batch are computed (possibly concurrently) and summed in batch
/// order, so the result is identical with and without parallelism.
pub fn train(net: &mut DiscrepancyNet, pairs: &[PreparedPair], cfg: &TrainConfig) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(Error::data("no training pairs"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("epochs and batch size must be at least 1"));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let fractions = target_fractions(pairs)?;
    let weights = class_weights(&fractions, cfg.weight_constant)?;
    let mut opt = Adam::new(&net.params, cfg.learning_rate);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = derived(cfg.seed, 0);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = par::try_map(batch, |&i| {
                net.loss_and_gradients(&pairs[i].input, &pairs[i].targets, &weights)
            })?;
            let mut grads = Vec::new();
            for (loss, g) in results {
                total += loss;
                add_grads(&mut grads, g);
            }
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            opt.step(&mut net.params, &grads);
        }
        if !net.params.all_finite() {
            return Err(Error::NonFinite(format!(
                "discrepancy weights after epoch {}",
                epoch + 1
            )));
        }
        let mean = total / pairs.len() as f64;
        log::debug!("discrepancy epoch {} mean loss {mean:.6}", epoch + 1);
        history.push(mean);
    }
    Ok(TrainReport {
        epoch_losses: history,
        class_weights: weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap()
    }

    fn rand_input(cfg: &DiscrepancyConfig, h: usize, w: usize, seed: u64) -> NetInput {
        let mut rng = seeded(seed);
        let img = Tensor::from_vec(3, h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap();
        let syn = Tensor::from_vec(3, h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap();
        let c = cfg.num_label_classes;
        let mut lab = Tensor::zeros(c, h, w);
        for i in 0..h * w {
            let k = rng.random_range(0..c);
            lab.data_mut()[k * h * w + i] = 1.0;
        }
        NetInput {
            image: img,
            resynth: syn,
            labels: lab,
        }
    }

    #[test]
    fn correlation_examples() {
        let a = rand_tensor(4, 3, 3, 1)
            .data()
            .iter()
            .map(|v| v + 1.0)
            .collect::<Vec<_>>();
        let a = Tensor::from_vec(4, 3, 3, a).unwrap();
        let same = pointwise_correlation(&a, &a).unwrap();
        assert!(same.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let mut neg = a.clone();
        neg.data_mut().iter_mut().for_each(|v| *v = -*v);
        let opp = pointwise_correlation(&a, &neg).unwrap();
        assert!(opp.data().iter().all(|v| (v + 1.0).abs() < 1e-12));
        assert!(pointwise_correlation(&a, &Tensor::zeros(4, 3, 2)).is_err());
    }

    #[test]
    fn fusion_shape_and_zero_projection() {
        let (r, s, l) = (
            rand_tensor(8, 5, 6, 1),
            rand_tensor(8, 5, 6, 2),
            rand_tensor(4, 5, 6, 3),
        );
        let out = fuse_level(&r, &s, &l, 16, 0).unwrap();
        assert_eq!(out.dims(), (17, 5, 6));
        let z = FusionLayer::zeroed(20, 16).apply(&r, &s, &l).unwrap();
        assert!(z.data()[..16 * 30].iter().all(|v| *v == 0.0));
        let corr = pointwise_correlation(&r, &s).unwrap();
        assert_eq!(&z.data()[16 * 30..], corr.data());
        assert!(fuse_level(&r, &s, &rand_tensor(4, 4, 6, 3), 16, 0).is_err());
    }

    #[test]
    fn fusion_shapes_hold_at_every_toy_level() {
        let cfg = DiscrepancyConfig::toy(5);
        let (mut h, mut w) = (64usize, 48usize);
        for l in 0..cfg.pyramid_levels() {
            let d = cfg.extractor.out_channels(l);
            let out = fuse_level(
                &rand_tensor(d, h, w, 1),
                &rand_tensor(d, h, w, 2),
                &rand_tensor(cfg.label_channels[l], h, w, 3),
                cfg.reduce_channels[l],
                l as u64,
            )
            .unwrap();
            assert_eq!(out.dims(), (cfg.reduce_channels[l] + 1, h, w));
            h /= 2;
            w /= 2;
        }
    }

    #[test]
    fn untrained_forward_is_valid() {
        let cfg = DiscrepancyConfig::toy(5);
        let net = DiscrepancyNet::new(cfg.clone(), 3).unwrap();
        for (h, w) in [(64, 64), (64, 96), (17, 23)] {
            let inp = rand_input(&cfg, h, w, 7);
            let s = net.forward(&inp).unwrap();
            assert_eq!(s.dims(), (w, h));
            assert!(s.scores().iter().all(|v| (0.0..=1.0).contains(v)));
            let probs = softmax_channels(&net.logits(&inp).unwrap());
            for i in 0..h * w {
                assert!((probs.data()[i] + probs.data()[h * w + i] - 1.0).abs() < 1e-6);
            }
        }
        let mut bad = rand_input(&cfg, 8, 8, 1);
        bad.resynth = Tensor::zeros(3, 8, 7);
        assert!(net.forward(&bad).is_err());
    }

    #[test]
    fn class_weight_values() {
        let w = class_weights(&[0.0, 1.0], 1.02).unwrap();
        assert!((w[0] - 50.4983).abs() < 1e-3);
        assert!((w[1] - 1.42227).abs() < 1e-4);
        assert!(class_weights(&[0.5, 0.5], 0.4).is_err());
        assert!(class_weights(&[0.5, 0.6], 1.02).is_err());
        let w = class_weights(&[0.2, 0.8], 1.02).unwrap();
        assert!(w[0] > w[1]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = DiscrepancyConfig::toy(3);
        cfg.reduce_channels.pop();
        assert!(DiscrepancyNet::new(cfg, 0).is_err());
        let mut one = DiscrepancyConfig::toy(3);
        one.extractor.stages.truncate(1);
        one.label_channels.truncate(1);
        one.reduce_channels.truncate(1);
        one.upconv_channels.truncate(1);
        assert!(one.validate().is_err());
        assert_eq!(DiscrepancyConfig::vgg16(19).pyramid_levels(), 5);
    }

    #[test]
    fn frozen_extractor_gets_no_gradient() {
        let mut cfg = DiscrepancyConfig::toy(3);
        cfg.freeze_extractor = true;
        let net = DiscrepancyNet::new(cfg.clone(), 1).unwrap();
        let inp = rand_input(&cfg, 8, 8, 2);
        let targets: Vec<u8> = (0..64).map(|i| (i % 2) as u8).collect();
        let (_, grads) = net.loss_and_gradients(&inp, &targets, &[1.0, 1.0]).unwrap();
        let id = net.params().id("extractor.s0.c0.weight").unwrap();
        assert!(grads[id.0].is_none());
        let head = net.params().id("head.weight").unwrap();
        assert!(grads[head.0].is_some());
    }

    #[test]
    fn all_ignore_targets_are_rejected() {
        let cfg = DiscrepancyConfig::toy(3);
        let mut net = DiscrepancyNet::new(cfg.clone(), 1).unwrap();
        let pair = PreparedPair {
            input: rand_input(&cfg, 8, 8, 1),
            targets: vec![AnomalyMask::IGNORE; 64],
        };
        assert!(matches!(
            train(&mut net, &[pair], &TrainConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let cfg = DiscrepancyConfig::toy(3);
        let mut net = DiscrepancyNet::new(cfg.clone(), 11).unwrap();
        let inp = rand_input(&cfg, 8, 8, 4);
        let targets: Vec<u8> = (0..64)
            .map(|i| {
                if i % 7 == 0 {
                    1
                } else if i % 11 == 0 {
                    AnomalyMask::IGNORE
                } else {
                    0
                }
            })
            .collect();
        let weights = [1.5, 4.0];
        let (_, grads) = net.loss_and_gradients(&inp, &targets, &weights).unwrap();
        let mut rng = seeded(9);
        for name in [
            "extractor.s0.c0.weight",
            "labels.s1.weight",
            "fuse.l2.weight",
            "decoder.l0.bias",
            "head.weight",
        ] {
            let id = net.params().id(name).unwrap();
            let g = grads[id.0].clone().unwrap();
            for _ in 0..4 {
                let k = rng.random_range(0..g.len());
                let h = 1e-5;
                let orig = net.params().get(id).data[k];
                net.params_mut().get_mut(id).data[k] = orig + h;
                let lp = net.loss(&inp, &targets, &weights).unwrap();
                net.params_mut().get_mut(id).data[k] = orig - h;
                let lm = net.loss(&inp, &targets, &weights).unwrap();
                net.params_mut().get_mut(id).data[k] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - g[k]).abs() <= 1e-6 + 1e-4 * fd.abs(),
                    "{name}[{k}]: {fd} vs {}",
                    g[k]
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = DiscrepancyConfig::toy(4);
        let net = DiscrepancyNet::new(cfg.clone(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        net.save(dir.path()).unwrap();
        let back = DiscrepancyNet::load(dir.path()).unwrap();
        let inp = rand_input(&cfg, 16, 16, 3);
        assert_eq!(net.forward(&inp).unwrap(), back.forward(&inp).unwrap());
    }
}
