//! Pixel-pooled ROC/AUROC evaluation and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::{write_json, AnomalyMask, Grid, RoiMask, ScoreMap};
use crate::error::{Error, Result};
use crate::par;

/// Number of bins used by [`Sweep::Quantized`] when none is given.
pub const DEFAULT_QUANT_BINS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    /// One threshold per distinct pooled score.
    #[default]
    Exact,
    /// Scores binned into equal-width bins between the pooled min and max.
    Quantized(usize),
}

/// `score >= thresholds[i]` is predicted anomalous at point `i`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub positives: usize,
    pub negatives: usize,
}

impl RocCurve {
    pub fn len(&self) -> usize {
        self.fpr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fpr.is_empty()
    }

    /// `threshold,fpr,tpr` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fpr,tpr\n");
        for i in 0..self.len() {
            let _ = writeln!(s, "{},{},{}", self.thresholds[i], self.fpr[i], self.tpr[i]);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mut lines = text.lines();
        if lines.next() != Some("threshold,fpr,tpr") {
            return Err(Error::data("curve CSV lacks the threshold,fpr,tpr header"));
        }
        let (mut t, mut f, mut p) = (Vec::new(), Vec::new(), Vec::new());
        for (n, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::data(format!("curve CSV row {}: bad number {s:?}", n + 2)))
            };
            if cols.len() != 3 {
                return Err(Error::data(format!(
                    "curve CSV row {} has {} columns",
                    n + 2,
                    cols.len()
                )));
            }
            t.push(parse(cols[0])?);
            f.push(parse(cols[1])?);
            p.push(parse(cols[2])?);
        }
        Ok((t, f, p))
    }
}

/// ROC over already pooled `(score, is_anomaly)` pairs.
pub fn roc_from_pairs(scores: &[f64], labels: &[bool], sweep: Sweep) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::shape("scores and labels differ in length"));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("pooled score {s}")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 {
        return Err(Error::data("no anomalous (positive) pixels in the evaluated region"));
    }
    if negatives == 0 {
        return Err(Error::data("no normal (negative) pixels in the evaluated region"));
    }

    let mut pairs: Vec<(f64, bool)> = match sweep {
        Sweep::Exact => scores.iter().copied().zip(labels.iter().copied()).collect(),
        Sweep::Quantized(bins) => {
            if bins < 2 {
                return Err(Error::invalid("quantized sweep needs at least 2 bins"));
            }
            let (lo, hi) = scores
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
            let width = (hi - lo) / bins as f64;
            scores
                .iter()
                .zip(labels)
                .map(|(&s, &l)| {
                    let q = if width > 0.0 {
                        (((s - lo) / width).floor() as usize).min(bins - 1)
                    } else {
                        0
                    };
                    (lo + q as f64 * width, l)
                })
                .collect()
        }
    };
    pairs.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));

    let mut thresholds = vec![f64::INFINITY];
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let t = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == t {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(t);
        fpr.push(fp as f64 / negatives as f64);
        tpr.push(tp as f64 / positives as f64);
    }
    Ok(RocCurve {
        thresholds,
        fpr,
        tpr,
        positives,
        negatives,
    })
}

/// Pool every pixel with `roi` true and mask ≠ IGNORE over the dataset.
pub fn pool_pixels(
    scores: &[ScoreMap],
    masks: &[AnomalyMask],
    rois: Option<&[RoiMask]>,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if scores.len() != masks.len() || rois.is_some_and(|r| r.len() != scores.len()) {
        return Err(Error::shape("score, mask and roi lists differ in length"));
    }
    let idx: Vec<usize> = (0..scores.len()).collect();
    let chunks = par::try_map(&idx, |&i| {
        let (s, m) = (&scores[i], &masks[i]);
        if s.dims() != m.dims() {
            return Err(Error::shape(format!(
                "sample {i}: score map {:?} and mask {:?} differ",
                s.dims(),
                m.dims()
            )));
        }
        let roi = match rois {
            Some(r) => {
                if r[i].dims() != m.dims() {
                    return Err(Error::shape(format!("sample {i}: roi size differs from mask")));
                }
                Some(r[i].values())
            }
            None => None,
        };
        let mut sc = Vec::new();
        let mut lb = Vec::new();
        for (p, (&v, &l)) in s.scores().iter().zip(m.values()).enumerate() {
            if l == AnomalyMask::IGNORE || roi.is_some_and(|r| !r[p]) {
                continue;
            }
            sc.push(v);
            lb.push(l == AnomalyMask::ANOMALY);
        }
        Ok((sc, lb))
    })?;
    let n: usize = chunks.iter().map(|c| c.0.len()).sum();
    let (mut all_s, mut all_l) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (s, l) in chunks {
        all_s.extend(s);
        all_l.extend(l);
    }
    Ok((all_s, all_l))
}

pub fn roc_curve(scores: &[ScoreMap], masks: &[AnomalyMask], rois: Option<&[RoiMask]>) -> Result<RocCurve> {
    roc_curve_with(scores, masks, rois, Sweep::Exact)
}

pub fn roc_curve_with(
    scores: &[ScoreMap],
    masks: &[AnomalyMask],
    rois: Option<&[RoiMask]>,
    sweep: Sweep,
) -> Result<RocCurve> {
    let (s, l) = pool_pixels(scores, masks, rois)?;
    roc_from_pairs(&s, &l, sweep)
}

/// Trapezoidal area under the curve.
pub fn auroc(curve: &RocCurve) -> f64 {
    let mut area = 0.0;
    for i in 1..curve.len() {
        area += (curve.fpr[i] - curve.fpr[i - 1]) * (curve.tpr[i] + curve.tpr[i - 1]) / 2.0;
    }
    area.clamp(0.0, 1.0)
}

/// Obstacle ∪ free space.
pub fn road_only_roi(mask: &AnomalyMask, freespace: &RoiMask) -> Result<RoiMask> {
    if mask.dims() != freespace.dims() {
        return Err(Error::shape("anomaly mask and free-space mask differ in size"));
    }
    let (w, h) = mask.dims();
    let v = mask
        .values()
        .iter()
        .zip(freespace.values())
        .map(|(&m, &f)| m == AnomalyMask::ANOMALY || f)
        .collect();
    Ok(RoiMask::new(Grid::from_vec(w, h, v)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoiMode {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "road-only")]
    RoadOnly,
}

impl RoiMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RoiMode::Full => "full",
            RoiMode::RoadOnly => "road-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(RoiMode::Full),
            "road-only" | "road_only" => Ok(RoiMode::RoadOnly),
            _ => Err(Error::invalid(format!(
                "unknown roi mode {s:?} (expected full or road-only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub dataset: String,
    pub roi: RoiMode,
    pub auroc: f64,
    pub positives: usize,
    pub negatives: usize,
    pub config_hash: String,
    #[serde(skip)]
    pub curve: RocCurve,
}

impl EvalReport {
    pub fn new(method: &str, dataset: &str, roi: RoiMode, curve: RocCurve, config_hash: &str) -> Self {
        Self {
            method: method.to_string(),
            dataset: dataset.to_string(),
            roi,
            auroc: auroc(&curve),
            positives: curve.positives,
            negatives: curve.negatives,
            config_hash: config_hash.to_string(),
            curve,
        }
    }

    pub fn stem(&self) -> String {
        format!("{}_{}_{}", self.dataset, self.method, self.roi.as_str())
    }
}

/// Write `{dataset}_{method}_{roi}.csv`, `.json` and `.svg`.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = report.stem();
    let csv = out_dir.join(format!("{stem}.csv"));
    fs::write(&csv, report.curve.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let json = out_dir.join(format!("{stem}.json"));
    write_json(report, &json)?;
    let svg = out_dir.join(format!("{stem}.svg"));
    fs::write(&svg, roc_svg(std::slice::from_ref(report))).map_err(|e| Error::io(&svg, e))?;
    Ok(vec![csv, json, svg])
}

/// One SVG with a labelled curve per report.
pub fn emit_combined_svg(reports: &[EvalReport], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, roc_svg(reports)).map_err(|e| Error::io(path, e))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn roc_svg(reports: &[EvalReport]) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 50.0;
    let px = |f: f64| PAD + f * SIZE;
    let py = |t: f64| PAD + (1.0 - t) * SIZE;
    let mut s = String::new();
    let total = SIZE + 2.0 * PAD;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{total}" height="{total}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 4"/>"##,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{v}</text>"#,
            px(v),
            PAD + SIZE + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{v}</text>"#,
            PAD - 6.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">false positive rate</text>"#,
        PAD + SIZE / 2.0,
        total - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-size="13" text-anchor="middle" transform="rotate(-90 14 {})">true positive rate</text>"#,
        PAD + SIZE / 2.0,
        PAD + SIZE / 2.0
    );
    for (k, r) in reports.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut pts = String::new();
        for (f, t) in r.curve.fpr.iter().zip(&r.curve.tpr) {
            let _ = write!(pts, "{:.2},{:.2} ", px(*f), py(*t));
        }
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.trim_end()
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{} (AUROC {:.4})</text>"#,
            PAD + SIZE - 170.0,
            PAD + SIZE - 12.0 - 16.0 * (reports.len() - 1 - k) as f64,
            xml_escape(&r.method),
            r.auroc
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
