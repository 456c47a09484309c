//! Directory layouts → `Sample` records.
//!
//! * `generic`: `{root}/{split}/images/{id}.png` with optional sibling
//!   `labels/`, `instances/`, `anomaly/`, `roi/`, `freespace/` and a
//!   `label_spec.json` in the split or the root directory.
//! * `cityscapes`: `leftImg8bit/{split}/{city}/{stem}_leftImg8bit.png`
//!   with `gtFine/{split}/{city}/{stem}_gtFine_labelTrainIds.png` and
//!   `..._gtFine_instanceIds.png`.
//! * `lostandfound`: `leftImg8bit/{split}/{seq}/{stem}_leftImg8bit.png`
//!   with `gtCoarse/{split}/{seq}/{stem}_gtCoarse_labelIds.png`
//!   (0 unlabelled, 1 free space, ≥ 2 obstacle) and an optional static
//!   `roi.png` in the root.

use std::fs;
use std::path::{Path, PathBuf};

use resyn_core::datamodel::{
    load_image, load_instance_raster, load_label_raster, load_mask, load_roi, read_json, resize_sample, AnomalyMask,
    Grid, InstanceMap, LabelSpec, RoiMask, Sample, SemanticMap,
};

use crate::error::CliError;

pub struct Dataset {
    pub spec: LabelSpec,
    pub samples: Vec<Sample>,
    /// Frames dropped because annotations were missing.
    pub skipped: usize,
}

fn missing(path: &Path) -> CliError {
    CliError::Data(format!("malformed dataset layout: missing {}", path.display()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rd = fs::read_dir(dir).map_err(|_| missing(dir))?;
    let mut out = Vec::new();
    for e in rd {
        let e = e.map_err(|e| CliError::Data(format!("cannot list {}: {e}", dir.display())))?;
        out.push(e.path());
    }
    out.sort();
    Ok(out)
}

pub fn load(adapter: &str, root: &Path, split: &str, resize: Option<[usize; 2]>) -> Result<Dataset, CliError> {
    let mut ds = match adapter {
        "generic" => generic(&root.join(split))?,
        "cityscapes" => cityscapes_like(root, split)?,
        "lostandfound" => lostandfound_like(root, split)?,
        other => {
            return Err(CliError::Config(format!(
                "unknown dataset adapter {other:?} (expected generic, cityscapes or lostandfound)"
            )))
        }
    };
    if let Some([w, h]) = resize {
        ds.samples = ds
            .samples
            .iter()
            .map(|s| resize_sample(s, w, h))
            .collect::<resyn_core::Result<_>>()?;
    }
    Ok(ds)
}

/// Generic layout of one split directory.
pub fn generic(dir: &Path) -> Result<Dataset, CliError> {
    let spec_path = [
        dir.join("label_spec.json"),
        dir.parent().map(|p| p.join("label_spec.json")).unwrap_or_default(),
    ]
    .into_iter()
    .find(|p| p.is_file())
    .ok_or_else(|| missing(&dir.join("label_spec.json")))?;
    let spec: LabelSpec = read_json(&spec_path)?;
    let images = dir.join("images");
    let mut samples = Vec::new();
    for path in sorted_entries(&images)? {
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let name = format!("{id}.png");
        let mut s = Sample::new(id, load_image(&path)?);
        let part = |sub: &str| -> Result<Option<PathBuf>, CliError> {
            let d = dir.join(sub);
            if !d.is_dir() {
                return Ok(None);
            }
            let p = d.join(&name);
            if p.is_file() {
                Ok(Some(p))
            } else {
                Err(missing(&p))
            }
        };
        if let Some(p) = part("labels")? {
            s.semantic = Some(SemanticMap::new(load_label_raster(&p)?, &spec)?);
        }
        if let Some(p) = part("instances")? {
            s.instances = Some(InstanceMap::new(load_instance_raster(&p)?));
        }
        if let Some(p) = part("anomaly")? {
            s.anomaly = Some(load_mask(&p)?);
        }
        if let Some(p) = part("roi")? {
            s.roi = Some(load_roi(&p)?);
        }
        if let Some(p) = part("freespace")? {
            s.freespace = Some(load_roi(&p)?);
        }
        s.validate()?;
        samples.push(s);
    }
    if samples.is_empty() {
        return Err(CliError::Data(format!("no images under {}", images.display())));
    }
    Ok(Dataset {
        spec,
        samples,
        skipped: 0,
    })
}

/// `(stem, image path)` for every `*_{suffix}.png` two levels below `dir`.
fn frames(dir: &Path, suffix: &str) -> Result<Vec<(PathBuf, String)>, CliError> {
    let mut out = Vec::new();
    for group in sorted_entries(dir)? {
        if !group.is_dir() {
            continue;
        }
        for f in sorted_entries(&group)? {
            let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if let Some(stem) = name.strip_suffix(&format!("_{suffix}.png")) {
                out.push((f.clone(), stem.to_string()));
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::Data(format!(
            "no *_{suffix}.png frames under {}",
            dir.display()
        )));
    }
    Ok(out)
}

pub fn cityscapes_like(root: &Path, split: &str) -> Result<Dataset, CliError> {
    let spec = LabelSpec::cityscapes();
    let mut samples = Vec::new();
    for (img, stem) in frames(&root.join("leftImg8bit").join(split), "leftImg8bit")? {
        let group = img.parent().and_then(|p| p.file_name()).expect("two levels deep");
        let gt = root.join("gtFine").join(split).join(group);
        let lab = gt.join(format!("{stem}_gtFine_labelTrainIds.png"));
        if !lab.is_file() {
            return Err(missing(&lab));
        }
        let mut s = Sample::new(stem.clone(), load_image(&img)?);
        s.semantic = Some(SemanticMap::new(load_label_raster(&lab)?, &spec)?);
        let inst = gt.join(format!("{stem}_gtFine_instanceIds.png"));
        if inst.is_file() {
            // stuff classes carry their label id (< 1000); things carry
            // label id * 1000 + index
            let raw = load_instance_raster(&inst)?;
            s.instances = Some(InstanceMap::new(raw.map(|&v| if v >= 1000 { v } else { 0 })));
        }
        s.validate()?;
        samples.push(s);
    }
    Ok(Dataset {
        spec,
        samples,
        skipped: 0,
    })
}

pub const LAF_FREESPACE: u8 = 1;
pub const LAF_FIRST_OBSTACLE: u8 = 2;

pub fn lostandfound_like(root: &Path, split: &str) -> Result<Dataset, CliError> {
    let static_roi = {
        let p = root.join("roi.png");
        if p.is_file() {
            Some(load_roi(&p)?)
        } else {
            None
        }
    };
    let mut samples = Vec::new();
    let mut skipped = 0;
    for (img, stem) in frames(&root.join("leftImg8bit").join(split), "leftImg8bit")? {
        let group = img.parent().and_then(|p| p.file_name()).expect("two levels deep");
        let lab = root
            .join("gtCoarse")
            .join(split)
            .join(group)
            .join(format!("{stem}_gtCoarse_labelIds.png"));
        if !lab.is_file() {
            log::warn!("skipping frame {stem}: annotation {} is missing", lab.display());
            skipped += 1;
            continue;
        }
        let ids = load_label_raster(&lab)?;
        let (w, h) = ids.dims();
        let mut s = Sample::new(stem, load_image(&img)?);
        s.anomaly = Some(AnomalyMask::new(ids.map(|&v| {
            if v >= LAF_FIRST_OBSTACLE {
                AnomalyMask::ANOMALY
            } else {
                AnomalyMask::NORMAL
            }
        }))?);
        s.freespace = Some(RoiMask::new(ids.map(|&v| v == LAF_FREESPACE)));
        s.roi = Some(match &static_roi {
            Some(r) if r.dims() == (w, h) => r.clone(),
            Some(r) => {
                return Err(CliError::Data(format!(
                    "roi.png is {:?} but frame {} is {w}x{h}",
                    r.dims(),
                    s.id
                )))
            }
            None => RoiMask::new(Grid::filled(w, h, true)),
        });
        s.validate()?;
        samples.push(s);
    }
    if skipped > 0 {
        log::warn!("{skipped} frame(s) skipped for missing annotations");
    }
    if samples.is_empty() {
        return Err(CliError::Data("every frame lacks annotations".into()));
    }
    // obstacle classes are unknown to any segmentation label set; the
    // Cityscapes spec documents the predicted classes
    Ok(Dataset {
        spec: LabelSpec::cityscapes(),
        samples,
        skipped,
    })
}
