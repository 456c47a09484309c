use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use resyn_core::advdetect::{
    dag_attack, fit_detector, make_pure_target, make_shift_target, resynth_distance, sc_score, separation_auroc,
    TargetKind, DETECTOR_THRESHOLD,
};
use resyn_core::baselines::rbm_score;
use resyn_core::datamodel::{
    load_score_map, read_json, save_image, save_score_map, write_json, AnomalyMask, ImageRgb, LabelSpec, RoiMask,
    Sample, ScoreMap,
};
use resyn_core::discrepancy::{prepare_pairs, target_fractions, train, DiscrepancyConfig, DiscrepancyNet, TrainConfig};
use resyn_core::evalharness::{emit_combined_svg, emit_report, road_only_roi, roc_curve_with, EvalReport, RoiMode};
use resyn_core::par;
use resyn_core::rng::{derive_seed, derive_seed_str, seeded};
use resyn_core::segmentation::{ensemble_uncertainty, mc_dropout_uncertainty, predict_labels, SegmentationBackend};
use resyn_core::synthesis::{build_training_pairs, load_training_pair, save_training_pair, GeneratorBackend};
use resyn_core::toyworld::{export_dataset, generate_split, toy_label_spec};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::finish_stage;
use crate::models;

pub const METHODS: [&str; 4] = ["discrepancy", "rbm", "dropout", "ensemble"];
const LABEL_SPEC: &str = "label_spec.json";

type Counts = BTreeMap<String, Value>;

fn fresh_dir(dir: &Path) -> Result<(), CliError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| CliError::Data(format!("cannot clear {}: {e}", dir.display())))?;
    }
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn counts<const N: usize>(items: [(&str, Value); N]) -> Counts {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub fn toyworld_gen(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let spec = toy_label_spec();
    let mut scene = cfg.toyworld.scene.clone();
    scene.seed = derive_seed(cfg.seed(), scene.seed);
    let (train, test) = generate_split(&scene, &spec, cfg.toyworld.n_train, cfg.toyworld.n_test)?;
    let root = cfg.dataset_root();
    for (split, samples) in [(&cfg.dataset.train_split, &train), (&cfg.dataset.test_split, &test)] {
        let d = root.join(split);
        fresh_dir(&d)?;
        export_dataset(&d, samples, &spec)?;
    }
    let anomaly_pixels: usize = test
        .iter()
        .filter_map(|s| s.anomaly.as_ref())
        .map(|m| m.count(AnomalyMask::ANOMALY))
        .sum();
    finish_stage(
        &root,
        "toyworld gen",
        cfg,
        counts([
            ("train_scenes", json!(train.len())),
            ("test_scenes", json!(test.len())),
            ("test_anomaly_pixels", json!(anomaly_pixels)),
        ]),
    )
}

pub fn pairs_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir().join("pairs")
}

pub fn gen_synthetic(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let ds = models::load_split(cfg, &cfg.dataset.train_split)?;
    let gen = models::generator(cfg, &ds.spec)?;
    let pairs = build_training_pairs(
        &ds.samples,
        &gen,
        &ds.spec,
        cfg.discrepancy.swap_prob,
        derive_seed_str(cfg.seed(), "swaps"),
    )?;
    let dir = pairs_dir(cfg);
    fresh_dir(&dir)?;
    write_json(&ds.spec, &dir.join(LABEL_SPEC))?;
    par::try_map(&pairs, |p| save_training_pair(p, &dir.join(&p.id)))?;
    let (mut pos, mut valid, mut swaps) = (0usize, 0usize, 0usize);
    for p in &pairs {
        pos += p.target.count(AnomalyMask::ANOMALY);
        valid += p.target.values().len() - p.target.count(AnomalyMask::IGNORE);
        swaps += p.swaps.len();
    }
    finish_stage(
        &dir,
        "gen-synthetic",
        cfg,
        counts([
            ("pairs", json!(pairs.len())),
            ("swapped_instances", json!(swaps)),
            ("positive_pixels", json!(pos)),
            ("valid_pixels", json!(valid)),
            (
                "positive_fraction",
                json!(if valid > 0 { pos as f64 / valid as f64 } else { 0.0 }),
            ),
        ]),
    )
}

#[derive(Serialize)]
struct TrainingSummary {
    epochs: usize,
    class_fractions: [f64; 2],
    class_weights: Vec<f64>,
    parameters: usize,
}

pub fn train_discrepancy(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let src = pairs_dir(cfg);
    if !src.is_dir() {
        return Err(CliError::Data(format!(
            "pair directory {} does not exist (run gen-synthetic first)",
            src.display()
        )));
    }
    let spec: LabelSpec = read_json(&src.join(LABEL_SPEC))?;
    let mut dirs: Vec<PathBuf> = fs::read_dir(&src)
        .map_err(|e| CliError::Data(format!("cannot list {}: {e}", src.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Data(format!("pair directory {} is empty", src.display())));
    }
    let pairs = par::try_map(&dirs, |d| load_training_pair(d, &spec))?;
    let prepared = prepare_pairs(&pairs, &spec)?;
    let arch = cfg
        .discrepancy
        .architecture
        .clone()
        .unwrap_or_else(|| DiscrepancyConfig::toy(spec.num_classes()));
    if arch.num_label_classes != spec.num_classes() {
        return Err(CliError::Config(format!(
            "discrepancy architecture expects {} label classes, the pairs have {}",
            arch.num_label_classes,
            spec.num_classes()
        )));
    }
    let mut net = DiscrepancyNet::new(arch, derive_seed_str(cfg.seed(), "discrepancy"))?;
    let tc = TrainConfig {
        seed: derive_seed(
            derive_seed_str(cfg.seed(), "discrepancy-train"),
            cfg.discrepancy.train.seed,
        ),
        ..cfg.discrepancy.train.clone()
    };
    log::info!(
        "training discrepancy network ({} parameters) on {} pairs for {} epochs",
        net.params().num_scalars(),
        prepared.len(),
        tc.epochs
    );
    let report = train(&mut net, &prepared, &tc)?;
    let dir = models::discrepancy_dir(cfg);
    fresh_dir(&dir)?;
    net.save(&dir)?;
    let loss = dir.join("loss.csv");
    fs::write(&loss, report.loss_csv()).map_err(|e| CliError::Data(format!("cannot write {}: {e}", loss.display())))?;
    write_json(
        &TrainingSummary {
            epochs: tc.epochs,
            class_fractions: target_fractions(&prepared)?,
            class_weights: report.class_weights.clone(),
            parameters: net.params().num_scalars(),
        },
        &dir.join("training.json"),
    )?;

    // the reloaded checkpoint must reproduce the trained network exactly
    let reloaded = DiscrepancyNet::load(&dir)?;
    let probe = &prepared[0].input;
    if reloaded.logits(probe)?.data() != net.logits(probe)?.data() {
        return Err(CliError::Data(format!(
            "checkpoint in {} does not reproduce the trained network",
            dir.display()
        )));
    }
    finish_stage(
        &dir,
        "train-discrepancy",
        cfg,
        counts([
            ("pairs", json!(prepared.len())),
            ("epochs", json!(tc.epochs)),
            ("final_loss", json!(report.epoch_losses.last())),
        ]),
    )
}

pub fn scores_dir(cfg: &RunConfig, method: &str) -> PathBuf {
    cfg.out_dir().join("scores").join(method)
}

fn unknown_method(method: &str) -> CliError {
    CliError::Config(format!(
        "unknown method {method:?} (expected one of {})",
        METHODS.join(", ")
    ))
}

pub fn score(cfg: &RunConfig, method: &str) -> Result<PathBuf, CliError> {
    if !METHODS.contains(&method) {
        return Err(unknown_method(method));
    }
    let ds = models::load_split(cfg, &cfg.dataset.test_split)?;
    let spec = &ds.spec;
    let seed = cfg.seed();
    let maps: Vec<ScoreMap> = match method {
        "discrepancy" => {
            let net = models::discrepancy_net(cfg)?;
            if net.config().num_label_classes != spec.num_classes() {
                return Err(CliError::Config(
                    "discrepancy checkpoint was trained on a different label set".into(),
                ));
            }
            let seg = models::segmenter(cfg, spec)?;
            let gen = models::generator(cfg, spec)?;
            par::try_map(&ds.samples, |s| {
                let pred = predict_labels(&seg, &s.image)?;
                let resynth = gen.generate(&pred)?;
                net.score(&s.image, &resynth, &pred, spec)
            })?
        }
        "rbm" => {
            let model = models::rbm(cfg, spec)?;
            par::try_map(&ds.samples, |s| rbm_score(&model, &s.image))?
        }
        "dropout" => {
            let seg = models::segmenter(cfg, spec)?;
            par::try_map(&ds.samples, |s| {
                let mut rng = seeded(derive_seed_str(seed, &format!("dropout/{}", s.id)));
                mc_dropout_uncertainty(&seg, &s.image, cfg.segmenter.mc_samples, &mut rng)
            })?
        }
        "ensemble" => {
            let members = models::ensemble(cfg, spec)?;
            let refs: Vec<&dyn SegmentationBackend> = members.iter().map(|m| m as &dyn SegmentationBackend).collect();
            par::try_map(&ds.samples, |s| ensemble_uncertainty(&refs, &s.image))?
        }
        _ => unreachable!("checked above"),
    };
    let dir = scores_dir(cfg, method);
    fresh_dir(&dir)?;
    let items: Vec<(&Sample, &ScoreMap)> = ds.samples.iter().zip(&maps).collect();
    par::try_map(&items, |(s, m)| save_score_map(m, &dir.join(format!("{}.png", s.id))))?;
    finish_stage(
        &dir,
        "score",
        cfg,
        counts([("method", json!(method)), ("samples", json!(maps.len()))]),
    )
}

fn eval_rois(samples: &[Sample], mode: RoiMode) -> Result<Vec<RoiMask>, CliError> {
    samples
        .iter()
        .map(|s| {
            let (w, h) = s.dims();
            let base = s.roi.clone().unwrap_or_else(|| RoiMask::full(w, h));
            match mode {
                RoiMode::Full => Ok(base),
                RoiMode::RoadOnly => {
                    let fs = s.freespace.as_ref().ok_or_else(|| {
                        CliError::Data(format!(
                            "sample {} has no free-space mask for road-only evaluation",
                            s.id
                        ))
                    })?;
                    let mask = s.anomaly.as_ref().expect("checked by caller");
                    Ok(road_only_roi(mask, fs)?.intersect(&base)?)
                }
            }
        })
        .collect()
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    method: &'a str,
    roi: &'a str,
    auroc: f64,
    positives: usize,
    negatives: usize,
}

/// `methods` empty means every configured method that has been scored.
pub fn eval(cfg: &RunConfig, methods: &[String]) -> Result<PathBuf, CliError> {
    let mode = RoiMode::parse(&cfg.eval.roi)?;
    let methods: Vec<String> = if methods.is_empty() {
        let found: Vec<String> = cfg
            .eval
            .methods
            .iter()
            .filter(|m| scores_dir(cfg, m).is_dir())
            .cloned()
            .collect();
        if found.is_empty() {
            return Err(CliError::Data(format!(
                "no score directories under {} (run score first)",
                cfg.out_dir().join("scores").display()
            )));
        }
        found
    } else {
        methods.to_vec()
    };
    for m in &methods {
        if !METHODS.contains(&m.as_str()) {
            return Err(unknown_method(m));
        }
    }
    let ds = models::load_split(cfg, &cfg.dataset.test_split)?;
    let masks: Vec<AnomalyMask> = ds
        .samples
        .iter()
        .map(|s| {
            s.anomaly
                .clone()
                .ok_or_else(|| CliError::Data(format!("sample {} has no anomaly mask", s.id)))
        })
        .collect::<Result<_, _>>()?;
    let rois = eval_rois(&ds.samples, mode)?;
    let dir = cfg.out_dir().join("eval");
    fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    let mut reports = Vec::new();
    for m in &methods {
        let sdir = scores_dir(cfg, m);
        let maps = par::try_map(&ds.samples, |s| {
            let p = sdir.join(format!("{}.png", s.id));
            if !p.is_file() {
                return Err(CliError::Data(format!("missing score map {}", p.display())));
            }
            let map = load_score_map(&p)?;
            if map.dims() != s.dims() {
                return Err(CliError::Data(format!(
                    "score map {} does not match its sample's size",
                    p.display()
                )));
            }
            Ok(map)
        })?;
        let curve = roc_curve_with(&maps, &masks, Some(&rois), cfg.eval.sweep)?;
        let report = EvalReport::new(m, &cfg.dataset.name, mode, curve, &cfg.hash());
        log::info!("{m} ({}): AUROC {:.4}", mode.as_str(), report.auroc);
        emit_report(&report, &dir)?;
        reports.push(report);
    }
    emit_combined_svg(
        &reports,
        &dir.join(format!("{}_{}_combined.svg", cfg.dataset.name, mode.as_str())),
    )?;
    let summary = dir.join(format!("{}_{}_summary.csv", cfg.dataset.name, mode.as_str()));
    let mut w = csv::Writer::from_path(&summary).map_err(|e| CliError::Data(format!("{}: {e}", summary.display())))?;
    for r in &reports {
        w.serialize(SummaryRow {
            method: &r.method,
            roi: mode.as_str(),
            auroc: r.auroc,
            positives: r.positives,
            negatives: r.negatives,
        })
        .map_err(|e| CliError::Data(format!("{}: {e}", summary.display())))?;
    }
    w.flush()
        .map_err(|e| CliError::Data(format!("{}: {e}", summary.display())))?;
    let aurocs: BTreeMap<String, f64> = reports.iter().map(|r| (r.method.clone(), r.auroc)).collect();
    finish_stage(
        &dir,
        "eval",
        cfg,
        counts([("roi", json!(mode.as_str())), ("auroc", json!(aurocs))]),
    )
}

fn target_kind(cfg: &RunConfig, method: Option<&str>) -> Result<TargetKind, CliError> {
    match method {
        None => Ok(cfg.attack.dag.target_kind),
        Some("shift") => Ok(TargetKind::Shift),
        Some("pure") => Ok(TargetKind::Pure),
        Some(other) => Err(CliError::Config(format!(
            "unknown attack target {other:?} (expected shift or pure)"
        ))),
    }
}

pub fn attack_dir(cfg: &RunConfig, kind: TargetKind) -> PathBuf {
    cfg.out_dir().join("attack").join(kind.as_str())
}

pub const ATTACKS_CSV: &str = "attacks.csv";

/// One row of `attacks.csv`; every sample contributes a clean and an
/// attacked row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub id: String,
    /// `clean` or `attacked`.
    pub variant: String,
    pub target_kind: String,
    pub target_label: Option<u8>,
    pub iterations_used: usize,
    pub success_rate: Option<f64>,
    pub linf_norm: f64,
    pub hog_distance: f64,
    pub sc_score: f64,
}

/// 8-bit copy of `adv` that stays inside the L∞ ball of radius `budget`
/// around `orig`, so the written PNG obeys the same bound as the attack.
pub fn quantize_within(adv: &ImageRgb, orig: &ImageRgb, budget: f64) -> ImageRgb {
    let (w, h) = adv.dims();
    ImageRgb::from_fn(w, h, |x, y| {
        let (a, o) = (adv.get(x, y), orig.get(x, y));
        std::array::from_fn(|c| {
            let mut q = (a[c] * 255.0).round();
            let d = q / 255.0 - o[c];
            if d.abs() > budget {
                q -= d.signum();
            }
            q / 255.0
        })
    })
}

pub fn attack(cfg: &RunConfig, method: Option<&str>) -> Result<PathBuf, CliError> {
    let kind = target_kind(cfg, method)?;
    let ds = models::load_split(cfg, &cfg.attack.split)?;
    let spec = &ds.spec;
    let seg = models::segmenter(cfg, spec)?;
    if !seg.capabilities().gradient_access {
        return Err(CliError::Capability(
            "DAG needs a segmentation backend with input gradients".into(),
        ));
    }
    let gen = models::generator(cfg, spec)?;
    let dag = resyn_core::advdetect::AttackConfig {
        target_kind: kind,
        ..cfg.attack.dag.clone()
    };
    let seed = cfg.seed();
    let dir = attack_dir(cfg, kind);
    fresh_dir(&dir)?;
    let adv_dir = dir.join("adversarial");
    fs::create_dir_all(&adv_dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", adv_dir.display())))?;
    let rows = par::try_map(&ds.samples, |s| -> Result<[AttackRow; 2], CliError> {
        let pred = predict_labels(&seg, &s.image)?;
        let (target, label) = match kind {
            TargetKind::Shift => (make_shift_target(&pred, dag.shift_offset, spec)?, None),
            TargetKind::Pure => {
                let l =
                    match dag.pure_label {
                        Some(l) => l,
                        None => seeded(derive_seed_str(seed, &format!("pure/{}", s.id)))
                            .random_range(0..spec.num_classes()) as u8,
                    };
                let (w, h) = s.dims();
                (make_pure_target(w, h, l, spec)?, Some(l))
            }
        };
        let out = dag_attack(&s.image, &seg, &target, &dag)?;
        save_image(
            &quantize_within(&out.adversarial, &s.image, dag.total_linf_budget),
            &adv_dir.join(format!("{}.png", s.id)),
        )?;
        let sc_seed = derive_seed_str(seed, &format!("sc/{}", s.id));
        let row = |variant: &str, img, iters, success, linf| -> Result<AttackRow, CliError> {
            Ok(AttackRow {
                id: s.id.clone(),
                variant: variant.into(),
                target_kind: kind.as_str().into(),
                target_label: label,
                iterations_used: iters,
                success_rate: success,
                linf_norm: linf,
                hog_distance: resynth_distance(img, &seg, &gen, &cfg.attack.hog)?,
                // both variants see the same crop positions
                sc_score: sc_score(img, &seg, &cfg.attack.sc, &mut seeded(sc_seed))?,
            })
        };
        Ok([
            row("clean", &s.image, 0, None, 0.0)?,
            row(
                "attacked",
                &out.adversarial,
                out.iterations_used,
                Some(out.success_rate),
                out.linf_norm,
            )?,
        ])
    })?;
    let csv_path = dir.join(ATTACKS_CSV);
    let mut w =
        csv::Writer::from_path(&csv_path).map_err(|e| CliError::Data(format!("{}: {e}", csv_path.display())))?;
    for r in rows.iter().flatten() {
        w.serialize(r)
            .map_err(|e| CliError::Data(format!("{}: {e}", csv_path.display())))?;
    }
    w.flush()
        .map_err(|e| CliError::Data(format!("{}: {e}", csv_path.display())))?;
    let success: Vec<f64> = rows.iter().filter_map(|r| r[1].success_rate).collect();
    let mean = success.iter().sum::<f64>() / success.len() as f64;
    let min = success.iter().copied().fold(f64::INFINITY, f64::min);
    let max_linf = rows.iter().map(|r| r[1].linf_norm).fold(0.0, f64::max);
    log::info!("{} attack: mean success {mean:.4}, min {min:.4}", kind.as_str());
    finish_stage(
        &dir,
        "attack",
        cfg,
        counts([
            ("target_kind", json!(kind.as_str())),
            ("samples", json!(rows.len())),
            ("mean_success_rate", json!(mean)),
            ("min_success_rate", json!(min)),
            ("max_linf_norm", json!(max_linf)),
        ]),
    )
}

pub fn read_attack_rows(path: &Path) -> Result<Vec<AttackRow>, CliError> {
    if !path.is_file() {
        return Err(CliError::Data(format!(
            "{} does not exist (run attack first)",
            path.display()
        )));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<AttackRow>, _>>()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DetectorFile {
    pub weight: f64,
    pub bias: f64,
    pub threshold: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DetectionReport {
    pub target_kind: String,
    pub pairs: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub train_accuracy: f64,
    /// Accuracy on the held-out pairs only.
    pub test_accuracy: f64,
    pub hog_test_auroc: f64,
    /// Separation of the spatial-consistency score on the same held-out
    /// pairs, with low consistency counted as suspicious.
    pub sc_test_auroc: f64,
    pub test_ids: Vec<String>,
}

pub fn detect_attack(cfg: &RunConfig, method: Option<&str>) -> Result<PathBuf, CliError> {
    let kind = target_kind(cfg, method)?;
    let rows = read_attack_rows(&attack_dir(cfg, kind).join(ATTACKS_CSV))?;
    let mut by_id: BTreeMap<&str, [Option<&AttackRow>; 2]> = BTreeMap::new();
    for r in &rows {
        let slot = match r.variant.as_str() {
            "clean" => 0,
            "attacked" => 1,
            v => return Err(CliError::Data(format!("row {}: unknown variant {v:?}", r.id))),
        };
        by_id.entry(&r.id).or_default()[slot] = Some(r);
    }
    let mut ids = Vec::new();
    let (mut hog_c, mut hog_a, mut sc_c, mut sc_a) = (vec![], vec![], vec![], vec![]);
    for (id, pair) in &by_id {
        let (Some(c), Some(a)) = (pair[0], pair[1]) else {
            return Err(CliError::Data(format!("sample {id} lacks a clean or attacked row")));
        };
        ids.push(id.to_string());
        hog_c.push(c.hog_distance);
        hog_a.push(a.hog_distance);
        sc_c.push(-c.sc_score);
        sc_a.push(-a.sc_score);
    }
    let mut rng = seeded(derive_seed_str(cfg.seed(), &format!("detector/{}", kind.as_str())));
    let (det, m) = fit_detector(&hog_c, &hog_a, cfg.attack.train_fraction, &mut rng)?;
    let pick = |v: &[f64]| m.test_indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let report = DetectionReport {
        target_kind: kind.as_str().into(),
        pairs: ids.len(),
        train_pairs: m.train_pairs,
        test_pairs: m.test_pairs,
        train_accuracy: m.train_accuracy,
        test_accuracy: m.test_accuracy,
        hog_test_auroc: m.test_auroc,
        sc_test_auroc: separation_auroc(&pick(&sc_c), &pick(&sc_a))?,
        test_ids: m.test_indices.iter().map(|&i| ids[i].clone()).collect(),
    };
    log::info!(
        "{} detector: held-out accuracy {:.4}, hog AUROC {:.4}, SC AUROC {:.4}",
        kind.as_str(),
        report.test_accuracy,
        report.hog_test_auroc,
        report.sc_test_auroc
    );
    let dir = cfg.out_dir().join("detect").join(kind.as_str());
    fresh_dir(&dir)?;
    write_json(
        &DetectorFile {
            weight: det.weight,
            bias: det.bias,
            threshold: DETECTOR_THRESHOLD,
        },
        &dir.join("detector.json"),
    )?;
    write_json(&report, &dir.join("detection.json"))?;
    finish_stage(
        &dir,
        "detect-attack",
        cfg,
        counts([
            ("pairs", json!(report.pairs)),
            ("test_accuracy", json!(report.test_accuracy)),
        ]),
    )
}
