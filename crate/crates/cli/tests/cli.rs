use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use resyn_cli::adapters;
use resyn_cli::commands::{read_attack_rows, DetectionReport};
use resyn_core::datamodel::{
    load_mask, load_score_map, read_json, save_image, save_label_raster, AnomalyMask, Grid, ImageRgb,
};
use resyn_core::rng::derive_seed;
use resyn_core::toyworld::{generate_split, toy_label_spec, ToySceneConfig};
use serde_json::Value;

const SEED: u64 = 3;

const SMALL: &str = r#"{
  "toyworld": {"n_train": 6, "n_test": 4},
  "segmenter": {"train": {"epochs": 2}, "ensemble_size": 2, "mc_samples": 3},
  "discrepancy": {"train": {"epochs": 2}},
  "rbm": {"epochs": 1},
  "attack": {"dag": {"max_iter": 3}, "sc": {"n_pairs": 3, "patch": 16}}
}"#;

struct Run {
    _tmp: tempfile::TempDir,
    out: PathBuf,
    config: PathBuf,
}

impl Run {
    fn new(config: &str) -> Run {
        let tmp = tempfile::tempdir().unwrap();
        let config_path = tmp.path().join("config.json");
        fs::write(&config_path, config).unwrap();
        Run {
            out: tmp.path().join("run"),
            config: config_path,
            _tmp: tmp,
        }
    }

    fn args(&self, cmd: &[&str]) -> Vec<String> {
        let mut a: Vec<String> = ["resyn", "--config"].iter().map(|s| s.to_string()).collect();
        a.push(self.config.display().to_string());
        a.extend([
            "--seed".into(),
            SEED.to_string(),
            "--out".into(),
            self.out.display().to_string(),
        ]);
        a.extend(cmd.iter().map(|s| s.to_string()));
        a
    }

    fn try_with_env(&self, cmd: &[&str], env: &[(&str, &str)]) -> anyhow::Result<Option<PathBuf>> {
        let env: Vec<(String, String)> = env.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        resyn_cli::run(self.args(cmd), &env)
    }

    fn ok(&self, cmd: &[&str]) -> PathBuf {
        self.try_with_env(cmd, &[]).unwrap().unwrap()
    }

    fn exit_code(&self, cmd: &[&str]) -> (i32, String) {
        let out = Command::new(env!("CARGO_BIN_EXE_resyn"))
            .args(&self.args(cmd)[1..])
            .env("RESYN_LOG", "error")
            .output()
            .unwrap();
        (
            out.status.code().unwrap(),
            String::from_utf8_lossy(&out.stderr).into_owned(),
        )
    }
}

fn json(path: &Path) -> Value {
    read_json(path).unwrap()
}

#[test]
fn toyworld_export_round_trips_through_generic_adapter() {
    let r = Run::new(SMALL);
    r.ok(&["toyworld", "gen"]);
    let spec = toy_label_spec();
    let scene = ToySceneConfig {
        seed: derive_seed(SEED, ToySceneConfig::default().seed),
        ..Default::default()
    };
    let (train, test) = generate_split(&scene, &spec, 6, 4).unwrap();
    for (split, expected) in [("train", train), ("test", test)] {
        let ds = adapters::generic(&r.out.join("dataset").join(split)).unwrap();
        assert_eq!(ds.spec, spec);
        assert_eq!(ds.samples.len(), expected.len());
        for (got, want) in ds.samples.iter().zip(&expected) {
            // images pass through 8-bit PNG
            let quantized = ImageRgb::from_fn(64, 64, |x, y| want.image.get(x, y).map(|v| (v * 255.0).round() / 255.0));
            assert_eq!(got.image, quantized);
            assert_eq!(got.semantic, want.semantic);
            assert_eq!(got.instances, want.instances);
            assert_eq!(got.anomaly, want.anomaly);
            assert_eq!(got.roi, want.roi);
            assert_eq!(got.freespace, want.freespace);
        }
    }
}

#[test]
fn gen_synthetic_counts_match_written_masks() {
    let r = Run::new(SMALL);
    r.ok(&["toyworld", "gen"]);
    let manifest = r.ok(&["gen-synthetic"]);
    let m = json(&manifest);
    assert_eq!(m["seed"], SEED);
    assert_eq!(m["command"], "gen-synthetic");
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert!(r.out.join("pairs/resolved_config.json").is_file());
    let (mut pos, mut valid, mut pairs) = (0usize, 0usize, 0usize);
    for e in fs::read_dir(r.out.join("pairs")).unwrap() {
        let p = e.unwrap().path();
        if !p.is_dir() {
            continue;
        }
        pairs += 1;
        let mask = load_mask(&p.join("target.png")).unwrap();
        for &v in mask.values() {
            pos += (v == AnomalyMask::ANOMALY) as usize;
            valid += (v != AnomalyMask::IGNORE) as usize;
        }
    }
    let c = &m["counts"];
    assert_eq!(c["pairs"], pairs);
    assert_eq!(c["positive_pixels"], pos);
    assert_eq!(c["valid_pixels"], valid);
    assert!((c["positive_fraction"].as_f64().unwrap() - pos as f64 / valid as f64).abs() < 1e-12);
    assert!(pos > 0);

    let first = fs::read(&manifest).unwrap();
    r.ok(&["gen-synthetic"]);
    assert_eq!(fs::read(&manifest).unwrap(), first);
}

#[test]
fn train_discrepancy_without_pairs_names_the_directory() {
    let r = Run::new(SMALL);
    let (code, stderr) = r.exit_code(&["train-discrepancy"]);
    assert_eq!(code, 3);
    assert!(stderr.contains(&r.out.join("pairs").display().to_string()), "{stderr}");
}

#[test]
fn discrepancy_training_scoring_and_two_method_eval() {
    let r = Run::new(SMALL);
    r.ok(&["toyworld", "gen"]);
    r.ok(&["gen-synthetic"]);
    r.ok(&["train-discrepancy"]);
    let loss = fs::read_to_string(r.out.join("discrepancy/loss.csv")).unwrap();
    assert_eq!(loss.lines().count() - 1, 2, "{loss}");

    for method in ["discrepancy", "rbm"] {
        r.ok(&["score", "--method", method]);
        let dir = r.out.join("scores").join(method);
        let maps: Vec<_> = fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        assert_eq!(maps.len(), 4);
        for p in maps {
            assert_eq!(load_score_map(&p).unwrap().dims(), (64, 64));
        }
    }

    r.ok(&["eval", "--method", "discrepancy,rbm"]);
    let eval = r.out.join("eval");
    let svg = fs::read_to_string(eval.join("toy_full_combined.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    let mut full = Vec::new();
    for m in ["discrepancy", "rbm"] {
        let rep = json(&eval.join(format!("toy_{m}_full.json")));
        let a = rep["auroc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&a));
        full.push(rep["positives"].as_u64().unwrap() + rep["negatives"].as_u64().unwrap());
    }

    r.try_with_env(
        &["eval", "--method", "discrepancy,rbm"],
        &[("RESYN_EVAL__ROI", "road-only")],
    )
    .unwrap();
    for (i, m) in ["discrepancy", "rbm"].iter().enumerate() {
        let rep = json(&eval.join(format!("toy_{m}_road-only.json")));
        let n = rep["positives"].as_u64().unwrap() + rep["negatives"].as_u64().unwrap();
        assert!(n < full[i]);
        assert!(rep["positives"].as_u64().unwrap() > 0);
    }
    let resolved = json(&eval.join("resolved_config.json"));
    assert_eq!(resolved["eval"]["roi"], "road-only");
}

#[test]
fn ensemble_of_one_is_a_precondition_error() {
    let r = Run::new(SMALL);
    r.ok(&["toyworld", "gen"]);
    let err = r
        .try_with_env(
            &["score", "--method", "ensemble"],
            &[("RESYN_SEGMENTER__ENSEMBLE_SIZE", "1")],
        )
        .unwrap_err();
    assert_eq!(resyn_cli::error::exit_code(&err), 2);
    assert!(format!("{err:#}").contains("ensemble"));
}

#[test]
fn dropout_needs_a_stochastic_segmenter() {
    let r = Run::new(SMALL);
    r.ok(&["toyworld", "gen"]);
    let err = r
        .try_with_env(
            &["score", "--method", "dropout"],
            &[("RESYN_SEGMENTER__ARCHITECTURE__DROPOUT", "0")],
        )
        .unwrap_err();
    assert_eq!(resyn_cli::error::exit_code(&err), 4);
}

#[test]
fn attack_rows_pair_up_and_rerun_identically() {
    let r = Run::new(&SMALL.replace(r#""n_test": 4"#, r#""n_test": 10"#));
    r.ok(&["toyworld", "gen"]);
    r.ok(&["attack", "--method", "shift"]);
    let csv = r.out.join("attack/shift/attacks.csv");
    let rows = read_attack_rows(&csv).unwrap();
    assert_eq!(rows.len(), 20);
    for pair in rows.chunks(2) {
        assert_eq!(pair[0].id, pair[1].id);
        assert_eq!(
            (pair[0].variant.as_str(), pair[1].variant.as_str()),
            ("clean", "attacked")
        );
        assert!(pair[1].linf_norm <= 0.05 + 1e-12);
    }
    let first = fs::read(&csv).unwrap();
    r.ok(&["attack", "--method", "shift"]);
    assert_eq!(fs::read(&csv).unwrap(), first);

    r.ok(&["detect-attack", "--method", "shift"]);
    let rep: DetectionReport = read_json(&r.out.join("detect/shift/detection.json")).unwrap();
    assert_eq!((rep.pairs, rep.train_pairs, rep.test_pairs), (10, 8, 2));
    assert_eq!(rep.test_ids.len(), 2);

    let (code, _) = r.exit_code(&["detect-attack", "--method", "pure"]);
    assert_eq!(code, 3);
}

fn write_laf_frame(root: &Path, stem: &str, with_label: bool) {
    let img_dir = root.join("leftImg8bit/test/seq01");
    let gt_dir = root.join("gtCoarse/test/seq01");
    fs::create_dir_all(&img_dir).unwrap();
    fs::create_dir_all(&gt_dir).unwrap();
    save_image(&ImageRgb::new(8, 4), &img_dir.join(format!("{stem}_leftImg8bit.png"))).unwrap();
    if with_label {
        let ids = Grid::from_fn(8, 4, |x, _| if x < 2 { 2 } else { 1 });
        save_label_raster(&ids, &gt_dir.join(format!("{stem}_gtCoarse_labelIds.png"))).unwrap();
    }
}

#[test]
fn lost_and_found_frames_without_annotations_are_skipped() {
    let tmp = tempfile::tempdir().unwrap();
    write_laf_frame(tmp.path(), "a", true);
    write_laf_frame(tmp.path(), "b", false);
    let ds = adapters::load("lostandfound", tmp.path(), "test", None).unwrap();
    assert_eq!(ds.skipped, 1);
    assert_eq!(ds.samples.len(), 1);
    let s = &ds.samples[0];
    assert_eq!(s.anomaly.as_ref().unwrap().count(AnomalyMask::ANOMALY), 8);
    assert_eq!(s.freespace.as_ref().unwrap().count(), 24);
}

#[test]
fn undeclared_label_ids_are_rejected() {
    let r = Run::new(SMALL);
    r.ok(&["toyworld", "gen"]);
    let lab = r.out.join("dataset/train/labels/train_0000.png");
    save_label_raster(&Grid::filled(64, 64, 9u8), &lab).unwrap();
    assert!(adapters::generic(&r.out.join("dataset/train")).is_err());
    let (code, stderr) = r.exit_code(&["gen-synthetic"]);
    assert_ne!(code, 0);
    assert!(stderr.contains('9'), "{stderr}");
}

#[test]
fn missing_layout_parts_are_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let err = adapters::load("generic", tmp.path(), "train", None).err().unwrap();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("label_spec.json"));
    assert_eq!(
        adapters::load("kitti", tmp.path(), "train", None)
            .err()
            .unwrap()
            .exit_code(),
        2
    );
}

#[test]
fn exit_codes_follow_failure_class() {
    let r = Run::new(SMALL);
    assert_eq!(r.exit_code(&["score", "--method", "bogus"]).0, 2);
    let bad = Run::new("{\"nope\": 1}");
    assert_eq!(bad.exit_code(&["toyworld", "gen"]).0, 2);
    let gen = Run::new(r#"{"generator": {"kind": "spade"}, "toyworld": {"n_train": 2, "n_test": 1}}"#);
    assert_eq!(gen.exit_code(&["toyworld", "gen"]).0, 0);
    assert_eq!(gen.exit_code(&["gen-synthetic"]).0, 4);
}

#[test]
fn deterministic_flag_is_recorded_but_not_hashed() {
    let r = Run::new(SMALL);
    let m = r.ok(&["toyworld", "gen"]);
    let hash = json(&m)["config_hash"].clone();
    let args = r.args(&["--deterministic", "toyworld", "gen"]);
    resyn_cli::run(args, &[]).unwrap();
    assert_eq!(json(&m)["config_hash"], hash);
    assert_eq!(json(&r.out.join("dataset/resolved_config.json"))["deterministic"], true);
}
