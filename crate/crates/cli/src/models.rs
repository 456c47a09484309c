//! Backend construction. Trained baselines are cached under `{out}/models`
//! and reused while their provenance (seed and settings) is unchanged.

use std::fs;
use std::path::{Path, PathBuf};

use resyn_core::baselines::{extract_road_patches, train_rbm, RbmModel};
use resyn_core::datamodel::{read_json, write_json, LabelSpec};
use resyn_core::discrepancy::DiscrepancyNet;
use resyn_core::rng::{derive_seed, derive_seed_str, seeded};
use resyn_core::segmentation::{SegTrainConfig, ToySegmenter};
use resyn_core::synthesis::ToyGenerator;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapters::{self, Dataset};
use crate::config::RunConfig;
use crate::error::CliError;

const PROVENANCE: &str = "provenance.json";

pub fn load_split(cfg: &RunConfig, split: &str) -> Result<Dataset, CliError> {
    adapters::load(&cfg.dataset.adapter, &cfg.dataset_root(), split, cfg.dataset.resize)
}

pub fn generator(cfg: &RunConfig, spec: &LabelSpec) -> Result<ToyGenerator, CliError> {
    match cfg.generator.kind.as_str() {
        "toy" => Ok(ToyGenerator::new(
            spec.clone(),
            cfg.generator.style_seed,
            cfg.generator.texture_amplitude,
        )),
        other => Err(CliError::Capability(format!(
            "generator backend {other:?} is not built in; only \"toy\" is available"
        ))),
    }
}

fn models_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir().join("models")
}

#[derive(Serialize, Deserialize, PartialEq)]
struct Provenance {
    seed: u64,
    settings: Value,
}

fn cached(dir: &Path, prov: &Provenance) -> bool {
    read_json::<Provenance>(&dir.join(PROVENANCE)).is_ok_and(|p| p == *prov)
}

fn mark(dir: &Path, prov: &Provenance) -> Result<(), CliError> {
    Ok(write_json(prov, &dir.join(PROVENANCE))?)
}

fn mkdir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn check_spec(seg: &ToySegmenter, spec: &LabelSpec) -> Result<(), CliError> {
    use resyn_core::segmentation::SegmentationBackend;
    if seg.label_spec() != spec {
        return Err(CliError::Config(
            "segmenter label specification differs from the dataset's".into(),
        ));
    }
    Ok(())
}

fn train_segmenter(cfg: &RunConfig, spec: &LabelSpec, tag: &str, dir: &Path) -> Result<ToySegmenter, CliError> {
    let seed = derive_seed_str(cfg.seed(), tag);
    let prov = Provenance {
        seed,
        settings: serde_json::json!({
            "architecture": cfg.segmenter.architecture,
            "train": cfg.segmenter.train,
            "dataset": cfg.dataset,
            "label_spec": spec,
        }),
    };
    if cached(dir, &prov) {
        let seg = ToySegmenter::load(dir)?;
        check_spec(&seg, spec)?;
        return Ok(seg);
    }
    let train = load_split(cfg, &cfg.dataset.train_split)?;
    if train.spec != *spec {
        return Err(CliError::Config(
            "train and evaluation splits use different label specifications".into(),
        ));
    }
    log::info!("training segmenter {tag} on {} samples", train.samples.len());
    let mut seg = ToySegmenter::new(spec.clone(), cfg.segmenter.architecture.clone(), seed)?;
    let tc = SegTrainConfig {
        seed: derive_seed(seed, cfg.segmenter.train.seed),
        ..cfg.segmenter.train.clone()
    };
    let losses = seg.train(&train.samples, &tc)?;
    log::info!(
        "segmenter {tag}: final loss {:.4}",
        losses.last().copied().unwrap_or(f64::NAN)
    );
    mkdir(dir)?;
    seg.save(dir)?;
    mark(dir, &prov)?;
    Ok(seg)
}

fn check_kind(cfg: &RunConfig) -> Result<(), CliError> {
    match cfg.segmenter.kind.as_str() {
        "toy" => Ok(()),
        other => Err(CliError::Capability(format!(
            "segmentation backend {other:?} is not built in; only \"toy\" is available"
        ))),
    }
}

/// The segmenter used for prediction: the configured checkpoint, or one
/// trained on the train split.
pub fn segmenter(cfg: &RunConfig, spec: &LabelSpec) -> Result<ToySegmenter, CliError> {
    check_kind(cfg)?;
    if let Some(ck) = &cfg.segmenter.checkpoint {
        let seg = ToySegmenter::load(ck)?;
        check_spec(&seg, spec)?;
        return Ok(seg);
    }
    train_segmenter(cfg, spec, "segmenter", &models_dir(cfg).join("segmenter"))
}

/// Independently initialised and trained ensemble members.
pub fn ensemble(cfg: &RunConfig, spec: &LabelSpec) -> Result<Vec<ToySegmenter>, CliError> {
    check_kind(cfg)?;
    let n = cfg.segmenter.ensemble_size;
    if n < 2 {
        return Err(CliError::Config(format!(
            "ensemble uncertainty needs at least 2 members, segmenter.ensemble_size is {n}"
        )));
    }
    (0..n)
        .map(|k| {
            let tag = format!("ensemble/{k}");
            train_segmenter(cfg, spec, &tag, &models_dir(cfg).join("ensemble").join(k.to_string()))
        })
        .collect()
}

pub fn rbm(cfg: &RunConfig, spec: &LabelSpec) -> Result<RbmModel, CliError> {
    let dir = models_dir(cfg).join("rbm");
    let seed = derive_seed_str(cfg.seed(), "rbm");
    let prov = Provenance {
        seed,
        settings: serde_json::json!({ "rbm": cfg.rbm, "dataset": cfg.dataset }),
    };
    if cached(&dir, &prov) {
        return Ok(RbmModel::load(&dir)?);
    }
    let train = load_split(cfg, &cfg.dataset.train_split)?;
    let patches = extract_road_patches(&train.samples, spec, &cfg.rbm)?;
    log::info!("training RBM on {} road patches", patches.len());
    let t = train_rbm(&patches, &cfg.rbm, &mut seeded(seed))?;
    mkdir(&dir)?;
    t.model.save(&dir)?;
    mark(&dir, &prov)?;
    Ok(t.model)
}

pub fn discrepancy_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir().join("discrepancy")
}

pub fn discrepancy_net(cfg: &RunConfig) -> Result<DiscrepancyNet, CliError> {
    let dir = cfg
        .discrepancy
        .checkpoint
        .clone()
        .unwrap_or_else(|| discrepancy_dir(cfg));
    if !dir.join("weights.bin").is_file() {
        return Err(CliError::Data(format!(
            "no discrepancy checkpoint in {} (run train-discrepancy first)",
            dir.display()
        )));
    }
    Ok(DiscrepancyNet::load(&dir)?)
}
