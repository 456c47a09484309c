//! Procedural road scenes with known objects and, on the test split,
//! never-seen anomaly shapes.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    save_image, save_instance_raster, save_label_raster, save_mask, save_roi, write_json, AnomalyMask, ClassDef, Grid,
    ImageRgb, InstanceMap, LabelSpec, RoiMask, Sample, SemanticMap,
};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{derive_seed, derive_seed_str, hash_unit, seeded};

pub const ROAD: u8 = 0;
pub const SKY: u8 = 1;
pub const BOX: u8 = 2;
pub const BLOB: u8 = 3;
pub const POST: u8 = 4;
pub const VOID: u8 = 255;

/// road, sky (background); box, blob, post (foreground).
pub fn toy_label_spec() -> LabelSpec {
    LabelSpec::new(
        vec![
            ClassDef::new("road", ROAD, false, [96, 96, 104]),
            ClassDef::new("sky", SKY, false, [150, 200, 240]),
            ClassDef::new("box", BOX, true, [190, 70, 40]),
            ClassDef::new("blob", BLOB, true, [50, 160, 60]),
            ClassDef::new("post", POST, true, [235, 225, 70]),
        ],
        VOID,
    )
    .expect("toy label spec is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyShape {
    Triangle,
    Diamond,
    Ring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyClass {
    pub name: String,
    pub shape: AnomalyShape,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySceneConfig {
    pub width: usize,
    pub height: usize,
    /// Horizon row as a fraction of the height, `[min, max]`.
    pub horizon: [f64; 2],
    /// Foreground objects per scene, inclusive.
    pub object_count: [usize; 2],
    /// Object side length in pixels, inclusive.
    pub object_size: [usize; 2],
    /// Anomalies per anomalous scene, inclusive.
    pub anomaly_count: [usize; 2],
    pub anomaly_size: [usize; 2],
    pub anomaly_classes: Vec<AnomalyClass>,
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl Default for ToySceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            horizon: [0.3, 0.45],
            object_count: [1, 3],
            object_size: [8, 16],
            anomaly_count: [1, 2],
            anomaly_size: [8, 14],
            anomaly_classes: vec![
                AnomalyClass {
                    name: "cone".into(),
                    shape: AnomalyShape::Triangle,
                    color: [230, 40, 220],
                },
                AnomalyClass {
                    name: "crate".into(),
                    shape: AnomalyShape::Diamond,
                    color: [20, 230, 230],
                },
                AnomalyClass {
                    name: "tyre".into(),
                    shape: AnomalyShape::Ring,
                    color: [10, 10, 10],
                },
            ],
            texture_amplitude: 0.05,
            seed: 0,
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 100;

impl ToySceneConfig {
    pub fn validate(&self, spec: &LabelSpec) -> Result<()> {
        if self.width < 32 || self.height < 32 {
            return Err(Error::invalid("toy scenes must be at least 32x32"));
        }
        if !(0.0 < self.horizon[0] && self.horizon[0] <= self.horizon[1] && self.horizon[1] < 1.0) {
            return Err(Error::invalid("horizon range must satisfy 0 < min <= max < 1"));
        }
        for (name, r) in [
            ("object_count", self.object_count),
            ("object_size", self.object_size),
            ("anomaly_count", self.anomaly_count),
            ("anomaly_size", self.anomaly_size),
        ] {
            if r[0] > r[1] {
                return Err(Error::invalid(format!("{name} range is reversed")));
            }
        }
        if self.object_size[0] == 0 || self.anomaly_size[0] < 3 {
            return Err(Error::invalid(
                "objects need a positive size and anomalies at least 3 pixels",
            ));
        }
        if self.anomaly_count[1] > 0 && self.anomaly_classes.is_empty() {
            return Err(Error::invalid("anomalies requested but no anomaly classes configured"));
        }
        for a in &self.anomaly_classes {
            if spec.classes().iter().any(|c| c.name == a.name || c.color == a.color) {
                return Err(Error::invalid(format!(
                    "anomaly class {} collides with a known class",
                    a.name
                )));
            }
        }
        if !(0.0..0.5).contains(&self.texture_amplitude) {
            return Err(Error::invalid("texture amplitude must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

/// Known class whose palette colour is nearest (Euclidean RGB) to `color`.
pub fn nearest_known_class(color: [u8; 3], spec: &LabelSpec) -> u8 {
    let d2 = |c: [u8; 3]| -> i32 { (0..3).map(|i| (c[i] as i32 - color[i] as i32).pow(2)).sum() };
    spec.classes()
        .iter()
        .min_by_key(|c| (d2(c.color), c.train_id))
        .expect("spec has classes")
        .train_id
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Canvas {
    w: usize,
    sem: Vec<u8>,
    inst: Vec<u32>,
    anomaly: Vec<u8>,
    /// Colour source per pixel: known class, or anomaly class index.
    paint: Vec<Paint>,
}

#[derive(Clone, Copy)]
enum Paint {
    Known(u8),
    Anomaly(usize),
}

impl Canvas {
    fn put(&mut self, x: usize, y: usize, label: u8, inst: u32, paint: Paint, anomaly: bool) {
        let i = y * self.w + x;
        self.sem[i] = label;
        self.inst[i] = inst;
        self.paint[i] = paint;
        self.anomaly[i] = if anomaly {
            AnomalyMask::ANOMALY
        } else {
            AnomalyMask::NORMAL
        };
    }
}

fn inside(shape: AnomalyShape, s: usize, dx: usize, dy: usize) -> bool {
    let (fx, fy) = (dx as f64 + 0.5, dy as f64 + 0.5);
    let sf = s as f64;
    let c = sf / 2.0;
    match shape {
        // apex at the top centre
        AnomalyShape::Triangle => (fx - c).abs() <= c * fy / sf,
        AnomalyShape::Diamond => (fx - c).abs() + (fy - c).abs() <= c,
        AnomalyShape::Ring => {
            let r = ((fx - c).powi(2) + (fy - c).powi(2)).sqrt();
            r <= c && r >= c * 0.45
        }
    }
}

/// One scene. `with_anomalies` places between `anomaly_count[0]` and
/// `anomaly_count[1]` anomaly shapes on free road.
pub fn generate_scene<R: Rng + ?Sized>(
    id: &str,
    cfg: &ToySceneConfig,
    spec: &LabelSpec,
    with_anomalies: bool,
    rng: &mut R,
) -> Result<Sample> {
    cfg.validate(spec)?;
    let (w, h) = (cfg.width, cfg.height);
    let horizon = ((rng.random_range(cfg.horizon[0]..=cfg.horizon[1])) * h as f64).round() as usize;
    let mut cv = Canvas {
        w,
        sem: vec![ROAD; w * h],
        inst: vec![0; w * h],
        anomaly: vec![AnomalyMask::NORMAL; w * h],
        paint: vec![Paint::Known(ROAD); w * h],
    };
    for y in 0..horizon {
        for x in 0..w {
            cv.put(x, y, SKY, 0, Paint::Known(SKY), false);
        }
    }

    let mut next_id = 1u32;
    let n_obj = rng.random_range(cfg.object_count[0]..=cfg.object_count[1]);
    let kinds = [BOX, BLOB, POST];
    for _ in 0..n_obj {
        let kind = kinds[rng.random_range(0..kinds.len())];
        let size = rng.random_range(cfg.object_size[0]..=cfg.object_size[1]);
        let (ow, oh) = match kind {
            POST => ((size / 4).max(2), (size * 2).min(h - 1)),
            _ => (size, size),
        };
        // the object stands on the road: its base lies below the horizon
        let base_lo = (horizon + 2).min(h - 1);
        let base = rng.random_range(base_lo..h);
        let y0 = (base + 1).saturating_sub(oh);
        let x0 = rng.random_range(0..=w.saturating_sub(ow));
        let id = next_id;
        next_id += 1;
        for y in y0..=base {
            for x in x0..(x0 + ow).min(w) {
                let keep = match kind {
                    BLOB => {
                        let (cx, cy) = (x0 as f64 + ow as f64 / 2.0, y0 as f64 + oh as f64 / 2.0);
                        let (rx, ry) = (ow as f64 / 2.0, oh as f64 / 2.0);
                        ((x as f64 + 0.5 - cx) / rx).powi(2) + ((y as f64 + 0.5 - cy) / ry).powi(2) <= 1.0
                    }
                    _ => true,
                };
                if keep {
                    cv.put(x, y, kind, id, Paint::Known(kind), false);
                }
            }
        }
    }

    if with_anomalies {
        let n_anom = rng.random_range(cfg.anomaly_count[0]..=cfg.anomaly_count[1]);
        for _ in 0..n_anom {
            let ai = rng.random_range(0..cfg.anomaly_classes.len());
            let class = &cfg.anomaly_classes[ai];
            let label = nearest_known_class(class.color, spec);
            let mut placed = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let s = rng.random_range(cfg.anomaly_size[0]..=cfg.anomaly_size[1]);
                if s > w || horizon + s > h {
                    continue;
                }
                let x0 = rng.random_range(0..=w - s);
                let y0 = rng.random_range(horizon..=h - s);
                let free = (y0..y0 + s).all(|y| {
                    (x0..x0 + s).all(|x| cv.sem[y * w + x] == ROAD && cv.anomaly[y * w + x] == AnomalyMask::NORMAL)
                });
                if !free {
                    continue;
                }
                let id = next_id;
                next_id += 1;
                for dy in 0..s {
                    for dx in 0..s {
                        if inside(class.shape, s, dx, dy) {
                            cv.put(x0 + dx, y0 + dy, label, id, Paint::Anomaly(ai), true);
                        }
                    }
                }
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::data(format!(
                    "scene {id}: no free road area for anomaly {} after {PLACEMENT_ATTEMPTS} attempts",
                    class.name
                )));
            }
        }
    }

    // texture differs per scene so that resynthesis is never pixel-exact
    let tex_seed = rng.random::<u64>();
    let amp = cfg.texture_amplitude;
    let paint = &cv.paint;
    let image = ImageRgb::from_fn(w, h, |x, y| {
        let (base, key) = match paint[y * w + x] {
            Paint::Known(l) => (spec.color_of(l), l as u64),
            Paint::Anomaly(a) => (cfg.anomaly_classes[a].color, 1000 + a as u64),
        };
        let t = amp * hash_unit(tex_seed, key, x as u64, y as u64);
        base.map(|c| quantize(c as f64 / 255.0 + t))
    });

    let freespace = RoiMask::new(Grid::from_vec(
        w,
        h,
        cv.sem
            .iter()
            .zip(&cv.anomaly)
            .map(|(&l, &a)| l == ROAD && a == AnomalyMask::NORMAL)
            .collect(),
    )?);
    let semantic = SemanticMap::new(Grid::from_vec(w, h, cv.sem)?, spec)?;
    let instances = InstanceMap::new(Grid::from_vec(w, h, cv.inst)?);
    instances.check_consistent(&semantic)?;
    let mut sample = Sample::new(id, image);
    sample.semantic = Some(semantic);
    sample.instances = Some(instances);
    sample.anomaly = Some(AnomalyMask::new(Grid::from_vec(w, h, cv.anomaly)?)?);
    sample.roi = Some(RoiMask::full(w, h));
    sample.freespace = Some(freespace);
    Ok(sample)
}

/// Scene ids are `train_NNNN` / `test_NNNN`; each scene draws from a stream
/// derived from `(cfg.seed, id)`.
pub fn generate_split(
    cfg: &ToySceneConfig,
    spec: &LabelSpec,
    n_train: usize,
    n_test: usize,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if n_train == 0 && n_test == 0 {
        return Err(Error::invalid("a split needs at least one scene"));
    }
    cfg.validate(spec)?;
    if n_test > 0 && cfg.anomaly_count[1] == 0 {
        return Err(Error::invalid("test scenes need anomalies but anomaly_count is [0, 0]"));
    }
    let train_seed = derive_seed(cfg.seed, 1);
    let test_seed = derive_seed(cfg.seed, 2);
    let train = par::map_range(n_train, |i| {
        let id = format!("train_{i:04}");
        generate_scene(&id, cfg, spec, false, &mut seeded(derive_seed_str(train_seed, &id)))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut test_cfg = cfg.clone();
    test_cfg.anomaly_count[0] = test_cfg.anomaly_count[0].max(1);
    let test = par::map_range(n_test, |i| {
        let id = format!("test_{i:04}");
        generate_scene(&id, &test_cfg, spec, true, &mut seeded(derive_seed_str(test_seed, &id)))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok((train, test))
}

/// Subdirectories of the generic dataset layout.
pub const LAYOUT_DIRS: [&str; 6] = ["images", "labels", "instances", "anomaly", "roi", "freespace"];

/// Write samples in the generic layout: `images/`, `labels/`, `instances/`
/// (16-bit), `anomaly/`, `roi/`, `freespace/` with one `{id}.png` each, plus
/// `label_spec.json`. Absent rasters are skipped.
pub fn export_dataset(dir: &Path, samples: &[Sample], spec: &LabelSpec) -> Result<()> {
    for sub in LAYOUT_DIRS {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    write_json(spec, &dir.join("label_spec.json"))?;
    par::try_map(samples, |s| {
        let name = format!("{}.png", s.id);
        save_image(&s.image, &dir.join("images").join(&name))?;
        if let Some(m) = &s.semantic {
            save_label_raster(m.grid(), &dir.join("labels").join(&name))?;
        }
        if let Some(m) = &s.instances {
            save_instance_raster(m.grid(), &dir.join("instances").join(&name))?;
        }
        if let Some(m) = &s.anomaly {
            save_mask(m, &dir.join("anomaly").join(&name))?;
        }
        if let Some(m) = &s.roi {
            save_roi(m, &dir.join("roi").join(&name))?;
        }
        if let Some(m) = &s.freespace {
            save_roi(m, &dir.join("freespace").join(&name))?;
        }
        Ok(())
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::{toy_generator, GeneratorBackend};

    fn scene(seed: u64, anomalies: bool) -> Sample {
        generate_scene(
            "s",
            &ToySceneConfig::default(),
            &toy_label_spec(),
            anomalies,
            &mut seeded(seed),
        )
        .unwrap()
    }

    #[test]
    fn same_seed_same_scene() {
        assert_eq!(scene(4, true), scene(4, true));
        assert_ne!(scene(4, true), scene(5, true));
    }

    #[test]
    fn no_anomalies_means_all_normal() {
        let s = scene(1, false);
        assert_eq!(s.anomaly.unwrap().count(AnomalyMask::ANOMALY), 0);
    }

    #[test]
    fn anomaly_pixels_carry_nearest_known_label() {
        let spec = toy_label_spec();
        let cfg = ToySceneConfig::default();
        for seed in 0..20 {
            let s = scene(seed, true);
            let sem = s.semantic.unwrap();
            let mask = s.anomaly.unwrap();
            assert!(mask.count(AnomalyMask::ANOMALY) > 0);
            let allowed: Vec<u8> = cfg
                .anomaly_classes
                .iter()
                .map(|a| nearest_known_class(a.color, &spec))
                .collect();
            for (&m, &l) in mask.values().iter().zip(sem.labels()) {
                if m == AnomalyMask::ANOMALY {
                    assert!(allowed.contains(&l));
                }
            }
        }
    }

    #[test]
    fn nearest_class_examples() {
        let spec = toy_label_spec();
        assert_eq!(nearest_known_class([96, 96, 104], &spec), ROAD);
        assert_eq!(nearest_known_class([255, 255, 0], &spec), POST);
        assert_eq!(nearest_known_class([0, 0, 0], &spec), ROAD);
    }

    #[test]
    fn resynthesis_matches_known_and_differs_on_anomalies() {
        let spec = toy_label_spec();
        let cfg = ToySceneConfig::default();
        let gen = toy_generator(&spec, 99);
        let (mut normal, mut n_normal, mut anom, mut n_anom) = (0.0, 0usize, 0.0, 0usize);
        for seed in 0..10 {
            let s = scene(seed, true);
            let syn = gen.generate(s.semantic.as_ref().unwrap()).unwrap();
            let mask = s.anomaly.as_ref().unwrap();
            let (w, h) = s.dims();
            for y in 0..h {
                for x in 0..w {
                    let (a, b) = (s.image.get(x, y), syn.get(x, y));
                    let d = (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>() / 3.0;
                    if *mask.grid().get(x, y) == AnomalyMask::ANOMALY {
                        anom += d;
                        n_anom += 1;
                    } else {
                        normal += d;
                        n_normal += 1;
                    }
                }
            }
        }
        let (normal, anom) = (normal / n_normal as f64, anom / n_anom as f64);
        assert!(normal < cfg.texture_amplitude, "normal diff {normal}");
        assert!(anom > 3.0 * cfg.texture_amplitude, "anomaly diff {anom}");
    }

    #[test]
    fn split_contract() {
        let spec = toy_label_spec();
        let (train, test) = generate_split(&ToySceneConfig::default(), &spec, 30, 30).unwrap();
        assert!(train
            .iter()
            .all(|s| s.anomaly.as_ref().unwrap().count(AnomalyMask::ANOMALY) == 0));
        assert!(test
            .iter()
            .all(|s| s.anomaly.as_ref().unwrap().count(AnomalyMask::ANOMALY) > 0));
        let ids: std::collections::HashSet<_> = train.iter().chain(&test).map(|s| s.id.clone()).collect();
        assert_eq!(ids.len(), 60);
        assert!(generate_split(&ToySceneConfig::default(), &spec, 0, 0).is_err());
    }

    #[test]
    fn impossible_anomaly_is_an_error() {
        let mut cfg = ToySceneConfig::default();
        cfg.anomaly_size = [60, 60];
        let r = generate_scene("x", &cfg, &toy_label_spec(), true, &mut seeded(0));
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn config_rejects_known_colours_and_small_dims() {
        let spec = toy_label_spec();
        let mut cfg = ToySceneConfig::default();
        cfg.anomaly_classes[0].color = spec.color_of(BOX);
        assert!(cfg.validate(&spec).is_err());
        let cfg = ToySceneConfig {
            width: 16,
            ..ToySceneConfig::default()
        };
        assert!(cfg.validate(&spec).is_err());
    }
}
