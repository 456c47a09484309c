use proptest::prelude::*;
use resyn_core::advdetect::{dag_attack, hog_features, make_pure_target, AttackConfig, HogConfig, TargetKind};
use resyn_core::baselines::patch_offsets;
use resyn_core::datamodel::{load_score_map, save_score_map, AnomalyMask, Grid, ImageRgb, ScoreMap};
use resyn_core::discrepancy::class_weights;
use resyn_core::evalharness::{auroc, roc_from_pairs, Sweep};
use resyn_core::par;
use resyn_core::rng::seeded;
use resyn_core::segmentation::{ToySegmenter, ToySegmenterConfig};
use resyn_core::synthesis::swap_instance_labels;
use resyn_core::toyworld::{generate_scene, toy_label_spec, ToySceneConfig};

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..300).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..20, n).prop_map(|v| v.into_iter().map(|x| x as f64 / 7.0).collect()),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

fn has_both(labels: &[bool]) -> bool {
    labels.iter().any(|&l| l) && labels.iter().any(|&l| !l)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn roc_is_monotone_from_origin_to_corner((s, l) in scored()) {
        prop_assume!(has_both(&l));
        let c = roc_from_pairs(&s, &l, Sweep::Exact).unwrap();
        prop_assert_eq!((c.fpr[0], c.tpr[0]), (0.0, 0.0));
        prop_assert_eq!((*c.fpr.last().unwrap(), *c.tpr.last().unwrap()), (1.0, 1.0));
        for i in 1..c.len() {
            prop_assert!(c.fpr[i] >= c.fpr[i - 1] && c.tpr[i] >= c.tpr[i - 1]);
            prop_assert!(c.thresholds[i] < c.thresholds[i - 1]);
        }
    }

    #[test]
    fn negating_scores_mirrors_auroc((s, l) in scored()) {
        prop_assume!(has_both(&l));
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let a = auroc(&roc_from_pairs(&s, &l, Sweep::Exact).unwrap());
        let b = auroc(&roc_from_pairs(&neg, &l, Sweep::Exact).unwrap());
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fine_quantization_matches_exact_on_coarse_scores((s, l) in scored()) {
        prop_assume!(has_both(&l));
        // scores sit on a 1/7 grid; one more bin than grid steps keeps them apart
        let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assume!(hi > lo);
        let exact = auroc(&roc_from_pairs(&s, &l, Sweep::Exact).unwrap());
        let q = auroc(&roc_from_pairs(&s, &l, Sweep::Quantized(((hi - lo) * 7.0).round() as usize + 1)).unwrap());
        prop_assert!((exact - q).abs() < 1e-12, "{} vs {}", exact, q);
    }

    #[test]
    fn larger_fractions_get_smaller_weights(raw in prop::collection::vec(0.001f64..1.0, 2..8)) {
        let sum: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        let w = class_weights(&p, 1.02).unwrap();
        for i in 0..p.len() {
            for j in 0..p.len() {
                if p[i] < p[j] {
                    prop_assert!(w[i] > w[j]);
                }
            }
        }
    }

    #[test]
    fn patch_offsets_tile_within_bounds(len in 0usize..200, patch in 1usize..20, stride in 1usize..20) {
        let offs = patch_offsets(len, patch, stride);
        if len < patch {
            prop_assert!(offs.is_empty());
        } else {
            prop_assert_eq!(offs.len(), (len - patch) / stride + 1);
            prop_assert!(offs.iter().all(|&o| o + patch <= len && o % stride == 0));
        }
    }

    #[test]
    fn swap_mask_marks_exactly_the_changed_pixels(seed in any::<u64>(), p in 0.05f64..=1.0) {
        let spec = toy_label_spec();
        let cfg = ToySceneConfig { width: 32, height: 32, object_size: [4, 8], anomaly_size: [4, 6], ..Default::default() };
        let scene = generate_scene("s", &cfg, &spec, false, &mut seeded(seed)).unwrap();
        let (sem, inst) = (scene.semantic.unwrap(), scene.instances.unwrap());
        let out = swap_instance_labels(&sem, &inst, &spec, p, &mut seeded(seed ^ 1)).unwrap();
        for i in 0..sem.labels().len() {
            let changed = sem.labels()[i] != out.semantic.labels()[i];
            prop_assert_eq!(changed, out.mask.values()[i] == AnomalyMask::ANOMALY);
            if changed {
                prop_assert!(spec.is_foreground(sem.labels()[i]));
            }
        }
    }

    #[test]
    fn hog_blocks_are_bounded_and_brightness_invariant(seed in any::<u64>(), shift in 0.0f64..0.3) {
        let spec = toy_label_spec();
        let cfg = ToySceneConfig { width: 32, height: 32, object_size: [4, 8], anomaly_size: [4, 6], ..Default::default() };
        let img = generate_scene("s", &cfg, &spec, true, &mut seeded(seed)).unwrap().image;
        let hog = HogConfig::default();
        let f = hog_features(&img, &hog).unwrap();
        let block = hog.block * hog.block * hog.bins;
        for b in f.chunks(block) {
            prop_assert!(b.iter().all(|&v| v >= 0.0));
            prop_assert!(b.iter().map(|v| v * v).sum::<f64>() <= 1.0 + 1e-9);
        }
        // a constant offset leaves every gradient unchanged while pixels stay unclipped
        let dimmer = ImageRgb::from_fn(32, 32, |x, y| img.get(x, y).map(|v| v * 0.6 + shift));
        let scaled = ImageRgb::from_fn(32, 32, |x, y| img.get(x, y).map(|v| v * 0.6));
        let (a, b) = (hog_features(&dimmer, &hog).unwrap(), hog_features(&scaled, &hog).unwrap());
        prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9));
    }

    #[test]
    fn score_maps_survive_persistence(vals in prop::collection::vec(-5.0f64..5.0, 12)) {
        let dir = tempfile::tempdir().unwrap();
        let map = ScoreMap::new(Grid::from_vec(4, 3, vals.clone()).unwrap()).unwrap();
        let path = dir.path().join("m.png");
        save_score_map(&map, &path).unwrap();
        let back = load_score_map(&path).unwrap();
        let (lo, hi) = map.min_max();
        let tol = (hi - lo) / 65535.0 + 1e-12;
        for (a, b) in map.scores().iter().zip(back.scores()) {
            prop_assert!((a - b).abs() <= tol);
        }
    }

    #[test]
    fn ordered_map_is_scheduling_independent(xs in prop::collection::vec(any::<u32>(), 0..500)) {
        let f = |x: &u32| x.wrapping_mul(2654435761);
        prop_assert_eq!(par::map(&xs, f), par::map_seq(&xs, f));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn dag_output_respects_budget_and_range(seed in any::<u64>(), budget in 0.01f64..0.3, label in 0u8..5) {
        let spec = toy_label_spec();
        let seg = ToySegmenter::new(spec.clone(), ToySegmenterConfig::default(), seed).unwrap();
        let cfg = ToySceneConfig { width: 32, height: 32, object_size: [4, 8], anomaly_size: [4, 6], ..Default::default() };
        let img = generate_scene("s", &cfg, &spec, false, &mut seeded(seed)).unwrap().image;
        let target = make_pure_target(32, 32, label, &spec).unwrap();
        let ac = AttackConfig { max_iter: 8, step_linf: 0.05, total_linf_budget: budget, target_kind: TargetKind::Pure, ..Default::default() };
        let out = dag_attack(&img, &seg, &target, &ac).unwrap();
        prop_assert!(out.linf_norm <= budget);
        for (a, o) in out.adversarial.tensor().data().iter().zip(img.tensor().data()) {
            prop_assert!((0.0..=1.0).contains(a));
            prop_assert!((a - o).abs() <= budget);
        }
    }
}
