//! Conditional generator contract and the synthetic label-swap procedure
//! that turns ordinary annotated scenes into discrepancy training pairs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    load_image, load_label_raster, load_mask, read_json, save_image, save_label_raster, save_mask, write_json,
    AnomalyMask, Grid, ImageRgb, InstanceMap, LabelSpec, Sample, SemanticMap,
};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{derive_seed_str, hash_unit, seeded};

/// Semantic map → image.
pub trait GeneratorBackend: Send + Sync {
    /// Render an image with the same size as `sem`. Must be deterministic.
    fn generate(&self, sem: &SemanticMap) -> Result<ImageRgb>;

    /// Whether `generate` may be called from several threads at once.
    fn concurrent_safe(&self) -> bool {
        false
    }
}

/// Renders each class as its palette colour plus a fixed procedural
/// texture. Void pixels are black.
#[derive(Debug, Clone)]
pub struct ToyGenerator {
    spec: LabelSpec,
    style_seed: u64,
    amplitude: f64,
}

pub const DEFAULT_TEXTURE_AMPLITUDE: f64 = 0.05;

impl ToyGenerator {
    pub fn new(spec: LabelSpec, style_seed: u64, amplitude: f64) -> Self {
        Self {
            spec,
            style_seed,
            amplitude,
        }
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    /// Colour of one pixel of class `label` at `(x, y)`.
    #[inline]
    pub fn render_pixel(&self, label: u8, x: usize, y: usize) -> [f64; 3] {
        if !self.spec.is_known(label) {
            return [0.0; 3];
        }
        let t = self.amplitude * hash_unit(self.style_seed, label as u64, x as u64, y as u64);
        self.spec
            .color_of(label)
            .map(|c| (c as f64 / 255.0 + t).clamp(0.0, 1.0))
    }
}

/// Toy backend with the default texture amplitude.
pub fn toy_generator(spec: &LabelSpec, style_seed: u64) -> ToyGenerator {
    ToyGenerator::new(spec.clone(), style_seed, DEFAULT_TEXTURE_AMPLITUDE)
}

impl GeneratorBackend for ToyGenerator {
    fn generate(&self, sem: &SemanticMap) -> Result<ImageRgb> {
        let (w, h) = sem.dims();
        Ok(ImageRgb::from_fn(w, h, |x, y| self.render_pixel(sem.get(x, y), x, y)))
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// Provenance of one synthetic label swap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapRecord {
    pub instance_id: u32,
    pub old_class: u8,
    pub new_class: u8,
    pub pixel_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwapOutcome {
    pub semantic: SemanticMap,
    /// 1 on swapped pixels, 0 elsewhere.
    pub mask: AnomalyMask,
    pub swaps: Vec<SwapRecord>,
}

/// Reassign randomly chosen foreground instances to a different known class.
///
/// Instances are visited in ascending id order; each is selected with
/// probability `swap_prob` and, if selected, receives a class drawn uniformly
/// from the known classes other than its own.
pub fn swap_instance_labels<R: Rng + ?Sized>(
    sem: &SemanticMap,
    inst: &InstanceMap,
    spec: &LabelSpec,
    swap_prob: f64,
    rng: &mut R,
) -> Result<SwapOutcome> {
    if !(swap_prob > 0.0 && swap_prob <= 1.0) {
        return Err(Error::invalid(format!(
            "swap probability {swap_prob} must lie in (0, 1]"
        )));
    }
    let n_known = spec.num_classes();
    if n_known < 2 {
        return Err(Error::invalid("label swapping needs at least two known classes"));
    }
    inst.check_consistent(sem)?;

    // id -> (class, pixel count), foreground only
    let mut instances: BTreeMap<u32, (u8, usize)> = BTreeMap::new();
    for (&id, &lab) in inst.ids().iter().zip(sem.labels()) {
        if id != 0 && spec.is_foreground(lab) {
            instances.entry(id).or_insert((lab, 0)).1 += 1;
        }
    }

    let mut remap: BTreeMap<u32, u8> = BTreeMap::new();
    let mut swaps = Vec::new();
    for (&id, &(old, count)) in &instances {
        if rng.random::<f64>() >= swap_prob {
            continue;
        }
        let mut new = rng.random_range(0..n_known - 1) as u8;
        if new >= old {
            new += 1;
        }
        remap.insert(id, new);
        swaps.push(SwapRecord {
            instance_id: id,
            old_class: old,
            new_class: new,
            pixel_count: count,
        });
    }

    let (w, h) = sem.dims();
    let mut labels = sem.labels().to_vec();
    let mut mask = vec![AnomalyMask::NORMAL; w * h];
    if !remap.is_empty() {
        for (i, &id) in inst.ids().iter().enumerate() {
            if let Some(&new) = remap.get(&id) {
                labels[i] = new;
                mask[i] = AnomalyMask::ANOMALY;
            }
        }
    }
    Ok(SwapOutcome {
        semantic: SemanticMap::from_grid_unchecked(Grid::from_vec(w, h, labels)?),
        mask: AnomalyMask::new(Grid::from_vec(w, h, mask)?)?,
        swaps,
    })
}

/// A real image, its resynthesis from altered labels, and the discrepancy
/// target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub id: String,
    pub image: ImageRgb,
    pub resynth: ImageRgb,
    pub altered_sem: SemanticMap,
    /// ANOMALY on swapped pixels, IGNORE on void pixels, NORMAL elsewhere.
    pub target: AnomalyMask,
    pub swaps: Vec<SwapRecord>,
}

pub fn build_training_pair<R: Rng + ?Sized>(
    sample: &Sample,
    gen: &dyn GeneratorBackend,
    spec: &LabelSpec,
    swap_prob: f64,
    rng: &mut R,
) -> Result<TrainingPair> {
    let sem = sample
        .semantic
        .as_ref()
        .ok_or_else(|| Error::data(format!("sample {} has no semantic map", sample.id)))?;
    let inst = sample
        .instances
        .as_ref()
        .ok_or_else(|| Error::data(format!("sample {} has no instance map", sample.id)))?;
    sample.validate()?;
    let swap = swap_instance_labels(sem, inst, spec, swap_prob, rng)?;
    let resynth = gen.generate(&swap.semantic)?;
    if resynth.dims() != sample.dims() {
        return Err(Error::shape("generator output size differs from its input map"));
    }
    let void = spec.void_id();
    let (w, h) = sample.dims();
    let target: Vec<u8> = swap
        .mask
        .values()
        .iter()
        .zip(swap.semantic.labels())
        .map(|(&m, &l)| if l == void { AnomalyMask::IGNORE } else { m })
        .collect();
    Ok(TrainingPair {
        id: sample.id.clone(),
        image: sample.image.clone(),
        resynth,
        altered_sem: swap.semantic,
        target: AnomalyMask::new(Grid::from_vec(w, h, target)?)?,
        swaps: swap.swaps,
    })
}

/// Build one pair per sample. Each sample draws from its own stream seeded
/// by `(seed, sample id)`, so the result does not depend on scheduling.
pub fn build_training_pairs(
    samples: &[Sample],
    gen: &dyn GeneratorBackend,
    spec: &LabelSpec,
    swap_prob: f64,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    let one = |s: &Sample| {
        let mut rng = seeded(derive_seed_str(seed, &s.id));
        build_training_pair(s, gen, spec, swap_prob, &mut rng)
    };
    if gen.concurrent_safe() {
        par::try_map(samples, one)
    } else {
        samples.iter().map(one).collect()
    }
}

const PAIR_IMAGE: &str = "image.png";
const PAIR_RESYNTH: &str = "resynth.png";
const PAIR_LABELS: &str = "labels.png";
const PAIR_TARGET: &str = "target.png";
const PAIR_SWAPS: &str = "swaps.json";

#[derive(Serialize, Deserialize)]
struct PairMeta {
    id: String,
    swaps: Vec<SwapRecord>,
}

/// Write a pair as `image.png`, `resynth.png`, `labels.png`, `target.png`
/// and `swaps.json` inside `dir`.
pub fn save_training_pair(pair: &TrainingPair, dir: &Path) -> Result<()> {
    save_image(&pair.image, &dir.join(PAIR_IMAGE))?;
    save_image(&pair.resynth, &dir.join(PAIR_RESYNTH))?;
    save_label_raster(pair.altered_sem.grid(), &dir.join(PAIR_LABELS))?;
    save_mask(&pair.target, &dir.join(PAIR_TARGET))?;
    write_json(
        &PairMeta {
            id: pair.id.clone(),
            swaps: pair.swaps.clone(),
        },
        &dir.join(PAIR_SWAPS),
    )
}

pub fn load_training_pair(dir: &Path, spec: &LabelSpec) -> Result<TrainingPair> {
    let meta: PairMeta = read_json(&dir.join(PAIR_SWAPS))?;
    let pair = TrainingPair {
        id: meta.id,
        image: load_image(&dir.join(PAIR_IMAGE))?,
        resynth: load_image(&dir.join(PAIR_RESYNTH))?,
        altered_sem: SemanticMap::new(load_label_raster(&dir.join(PAIR_LABELS))?, spec)?,
        target: load_mask(&dir.join(PAIR_TARGET))?,
        swaps: meta.swaps,
    };
    let d = pair.image.dims();
    if pair.resynth.dims() != d || pair.altered_sem.dims() != d || pair.target.dims() != d {
        return Err(Error::shape(format!(
            "pair {} has rasters of differing sizes",
            dir.display()
        )));
    }
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::ClassDef;
    use crate::rng::seeded;

    fn spec() -> LabelSpec {
        LabelSpec::new(
            vec![
                ClassDef::new("road", 0, false, [128, 64, 128]),
                ClassDef::new("car", 1, true, [0, 0, 142]),
                ClassDef::new("person", 2, true, [220, 20, 60]),
            ],
            255,
        )
        .unwrap()
    }

    fn one_car() -> (SemanticMap, InstanceMap) {
        let sem = Grid::from_fn(6, 4, |x, y| if (1..3).contains(&x) && y < 2 { 1u8 } else { 0 });
        let inst = sem.map(|&l| if l == 1 { 7u32 } else { 0 });
        (SemanticMap::from_grid_unchecked(sem), InstanceMap::new(inst))
    }

    #[test]
    fn forced_swap_changes_exactly_the_instance() {
        let (sem, inst) = one_car();
        let out = swap_instance_labels(&sem, &inst, &spec(), 1.0, &mut seeded(1)).unwrap();
        assert_eq!(out.swaps.len(), 1);
        let rec = &out.swaps[0];
        assert_eq!((rec.instance_id, rec.old_class, rec.pixel_count), (7, 1, 4));
        assert!(rec.new_class == 0 || rec.new_class == 2);
        for i in 0..24 {
            let swapped = inst.ids()[i] == 7;
            assert_eq!(out.mask.values()[i] == AnomalyMask::ANOMALY, swapped);
            if swapped {
                assert_eq!(out.semantic.labels()[i], rec.new_class);
            } else {
                assert_eq!(out.semantic.labels()[i], sem.labels()[i]);
            }
        }
    }

    #[test]
    fn background_only_maps_are_untouched() {
        let sem = SemanticMap::filled(5, 5, 0);
        let inst = InstanceMap::new(Grid::filled(5, 5, 0));
        let out = swap_instance_labels(&sem, &inst, &spec(), 1.0, &mut seeded(3)).unwrap();
        assert_eq!(out.semantic, sem);
        assert!(out.swaps.is_empty());
        assert_eq!(out.mask.count(AnomalyMask::ANOMALY), 0);
    }

    #[test]
    fn argument_errors() {
        let (sem, inst) = one_car();
        assert!(swap_instance_labels(&sem, &inst, &spec(), 0.0, &mut seeded(1)).is_err());
        assert!(swap_instance_labels(&sem, &inst, &spec(), 1.5, &mut seeded(1)).is_err());
        let tiny = LabelSpec::new(vec![ClassDef::new("car", 0, true, [0; 3])], 255).unwrap();
        let sem1 = SemanticMap::filled(2, 2, 0);
        let inst1 = InstanceMap::new(Grid::filled(2, 2, 1));
        assert!(swap_instance_labels(&sem1, &inst1, &tiny, 1.0, &mut seeded(1)).is_err());
        // inconsistent instance map
        let bad = InstanceMap::new(Grid::filled(6, 4, 7));
        assert!(swap_instance_labels(&sem, &bad, &spec(), 1.0, &mut seeded(1)).is_err());
    }

    #[test]
    fn same_seed_same_swaps() {
        let sem = Grid::from_fn(20, 20, |x, _| if x % 2 == 1 { 1u8 } else { 0 });
        let inst = sem.map(|&l| l as u32);
        let inst = InstanceMap::new(Grid::from_fn(
            20,
            20,
            |x, y| if *inst.get(x, y) == 1 { x as u32 } else { 0 },
        ));
        let sem = SemanticMap::from_grid_unchecked(sem);
        let a = swap_instance_labels(&sem, &inst, &spec(), 0.5, &mut seeded(11)).unwrap();
        let b = swap_instance_labels(&sem, &inst, &spec(), 0.5, &mut seeded(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn toy_generator_is_deterministic_and_local() {
        let g = toy_generator(&spec(), 4);
        let road = SemanticMap::filled(8, 8, 0);
        let a = g.generate(&road).unwrap();
        assert_eq!(a, g.generate(&road).unwrap());
        let c = spec().color_of(0).map(|v| v as f64 / 255.0);
        for y in 0..8 {
            for x in 0..8 {
                let p = a.get(x, y);
                for ch in 0..3 {
                    assert!((p[ch] - c[ch]).abs() <= DEFAULT_TEXTURE_AMPLITUDE + 1e-12);
                }
            }
        }
        let (sem, inst) = one_car();
        let swapped = swap_instance_labels(&sem, &inst, &spec(), 1.0, &mut seeded(1)).unwrap();
        let ia = g.generate(&sem).unwrap();
        let ib = g.generate(&swapped.semantic).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                if inst.grid().get(x, y) == &0 {
                    assert_eq!(ia.get(x, y), ib.get(x, y));
                } else {
                    assert_ne!(ia.get(x, y), ib.get(x, y));
                }
            }
        }
    }

    #[test]
    fn pair_target_is_swap_mask_and_round_trips() {
        let (sem, inst) = one_car();
        let mut s = Sample::new("s0", ImageRgb::new(6, 4));
        s.semantic = Some(sem.clone());
        s.instances = Some(inst);
        let gen = toy_generator(&spec(), 0);
        let pair = build_training_pair(&s, &gen, &spec(), 1.0, &mut seeded(5)).unwrap();
        assert_eq!(pair.target.count(AnomalyMask::ANOMALY), 4);
        for i in 0..24 {
            if pair.target.values()[i] == AnomalyMask::ANOMALY {
                assert_ne!(pair.altered_sem.labels()[i], sem.labels()[i]);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        save_training_pair(&pair, dir.path()).unwrap();
        let back = load_training_pair(dir.path(), &spec()).unwrap();
        assert_eq!(back.target, pair.target);
        assert_eq!(back.altered_sem, pair.altered_sem);
        assert_eq!(back.swaps, pair.swaps);
        assert!(back.resynth.linf_distance(&pair.resynth) <= 0.5 / 255.0 + 1e-12);

        let mut bare = s.clone();
        bare.instances = None;
        assert!(build_training_pair(&bare, &gen, &spec(), 1.0, &mut seeded(5)).is_err());
    }
}
