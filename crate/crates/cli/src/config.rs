//! Run configuration: defaults, then the JSON file, then `RESYN_*`
//! environment variables, then command-line flags.

use std::path::{Path, PathBuf};

use resyn_core::advdetect::{AttackConfig, HogConfig, ScConfig};
use resyn_core::baselines::RbmConfig;
use resyn_core::discrepancy::{DiscrepancyConfig, TrainConfig};
use resyn_core::evalharness::Sweep;
use resyn_core::segmentation::{SegTrainConfig, ToySegmenterConfig, DEFAULT_MC_SAMPLES};
use resyn_core::toyworld::ToySceneConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "RESYN_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// `generic`, `cityscapes` or `lostandfound`.
    pub adapter: String,
    /// Defaults to `{out}/dataset`.
    pub root: Option<PathBuf>,
    pub name: String,
    pub train_split: String,
    pub test_split: String,
    /// Resize every sample to `[width, height]` on load.
    pub resize: Option<[usize; 2]>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            adapter: "generic".into(),
            root: None,
            name: "toy".into(),
            train_split: "train".into(),
            test_split: "test".into(),
            resize: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyworldConfig {
    pub scene: ToySceneConfig,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for ToyworldConfig {
    fn default() -> Self {
        Self {
            scene: ToySceneConfig::default(),
            n_train: 200,
            n_test: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterConfig {
    /// Only `toy` is built in.
    pub kind: String,
    /// Saved segmenter to use instead of training one under `{out}/models`.
    pub checkpoint: Option<PathBuf>,
    pub architecture: ToySegmenterConfig,
    pub train: SegTrainConfig,
    pub ensemble_size: usize,
    pub mc_samples: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            kind: "toy".into(),
            checkpoint: None,
            architecture: ToySegmenterConfig::default(),
            train: SegTrainConfig::default(),
            ensemble_size: 4,
            mc_samples: DEFAULT_MC_SAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Only `toy` is built in.
    pub kind: String,
    pub style_seed: u64,
    pub texture_amplitude: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kind: "toy".into(),
            style_seed: 7,
            texture_amplitude: resyn_core::synthesis::DEFAULT_TEXTURE_AMPLITUDE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscrepancySection {
    /// `None` selects the toy architecture sized to the label spec.
    pub architecture: Option<DiscrepancyConfig>,
    /// Checkpoint read by `score`; defaults to `{out}/discrepancy`.
    pub checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
    pub swap_prob: f64,
}

impl Default for DiscrepancySection {
    fn default() -> Self {
        Self {
            architecture: None,
            checkpoint: None,
            train: TrainConfig::default(),
            swap_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub dag: AttackConfig,
    pub hog: HogConfig,
    pub sc: ScConfig,
    pub train_fraction: f64,
    /// Which split is attacked.
    pub split: String,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            dag: AttackConfig::default(),
            hog: HogConfig::default(),
            // a quarter of the toy frame width, as 256 px is for 1024 px frames
            sc: ScConfig { n_pairs: 50, patch: 16 },
            train_fraction: 0.8,
            split: "test".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// `full` or `road-only`.
    pub roi: String,
    pub methods: Vec<String>,
    pub sweep: Sweep,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            roi: "full".into(),
            methods: vec!["discrepancy".into(), "rbm".into(), "dropout".into(), "ensemble".into()],
            sweep: Sweep::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub deterministic: bool,
    pub dataset: DatasetConfig,
    pub toyworld: ToyworldConfig,
    pub segmenter: SegmenterConfig,
    pub generator: GeneratorConfig,
    pub discrepancy: DiscrepancySection,
    pub rbm: RbmConfig,
    pub attack: AttackSection,
    pub eval: EvalSection,
}

/// Command-line values that take precedence over everything else.
#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub deterministic: bool,
}

fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

/// `RESYN_A__B=v` sets `a.b`. Values are parsed as JSON when possible and
/// used as strings otherwise.
fn apply_env(root: &mut Value, env: &[(String, String)]) -> Result<(), CliError> {
    let mut vars: Vec<&(String, String)> = env.iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        if key == "RESYN_LOG" {
            continue;
        }
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(|s| s.to_ascii_lowercase())
            .collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(CliError::Config(format!("malformed override variable {key}")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        let (leaf, sections) = path.split_last().expect("non-empty");
        let mut node = &mut *root;
        for (i, part) in sections.iter().enumerate() {
            let child = node
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| CliError::Config(format!("{key}: unknown section {}", path[..=i].join("."))))?;
            if child.is_null() {
                *child = Value::Object(Default::default());
            }
            node = child;
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("{key}: {} is not a section", sections.join("."))))?;
        if !obj.contains_key(leaf) {
            return Err(CliError::Config(format!("{key}: unknown setting {}", path.join("."))));
        }
        obj.insert(leaf.clone(), value);
    }
    Ok(())
}

impl RunConfig {
    pub fn resolve(
        file: Option<&Path>,
        env: &[(String, String)],
        flags: &FlagOverrides,
    ) -> Result<RunConfig, CliError> {
        let mut root = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
            if !v.is_object() {
                return Err(CliError::Config(format!(
                    "config {} must be a JSON object",
                    path.display()
                )));
            }
            merge(&mut root, v);
        }
        apply_env(&mut root, env)?;
        let mut cfg: RunConfig =
            serde_json::from_value(root).map_err(|e| CliError::Config(format!("invalid configuration: {e}")))?;
        if flags.seed.is_some() {
            cfg.seed = flags.seed;
        }
        if flags.out.is_some() {
            cfg.out_dir = flags.out.clone();
        }
        cfg.deterministic |= flags.deterministic;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seed.is_none() {
            return Err(CliError::Config(
                "a seed is required (--seed, RESYN_SEED or \"seed\")".into(),
            ));
        }
        if self.out_dir.is_none() {
            return Err(CliError::Config(
                "an output directory is required (--out, RESYN_OUT_DIR or \"out_dir\")".into(),
            ));
        }
        for p in [&self.segmenter.checkpoint, &self.discrepancy.checkpoint]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(CliError::Config(format!("checkpoint {} does not exist", p.display())));
            }
        }
        if !(0.0 < self.discrepancy.swap_prob && self.discrepancy.swap_prob <= 1.0) {
            return Err(CliError::Config("discrepancy.swap_prob must lie in (0, 1]".into()));
        }
        if !(0.0 < self.attack.train_fraction && self.attack.train_fraction < 1.0) {
            return Err(CliError::Config("attack.train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated")
    }

    pub fn out_dir(&self) -> &Path {
        self.out_dir.as_deref().expect("validated")
    }

    pub fn dataset_root(&self) -> PathBuf {
        self.dataset
            .root
            .clone()
            .unwrap_or_else(|| self.out_dir().join("dataset"))
    }

    /// SHA-256 of the configuration with location-only fields removed, so
    /// the same experiment run in two directories hashes identically.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        c.dataset.root = None;
        c.segmenter.checkpoint = None;
        c.discrepancy.checkpoint = None;
        c.deterministic = false;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
