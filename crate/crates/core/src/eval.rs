//! Scoring detections against ground truth: greedy IoU matching,
//! precision/recall, threshold sweeps and size buckets.
//!
//! "Accuracy" in the reported curves is precision, TP / (TP + FP).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{detection_order, iou, Detection};
use crate::synth::{AnnotatedObject, Annotation};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Format { path: String, line: usize, message: String },
    #[error("detections reference image `{0}` which has no annotation")]
    UnknownImage(String),
    #[error("{0}: {1}")]
    Csv(String, #[source] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub min_curve_score: f64,
    /// Score threshold of the reported operating point.
    pub operating_score: f64,
    /// Inclusive upper area bounds of the small, medium and large buckets.
    pub bucket_bounds: [f64; 3],
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            min_curve_score: 0.01,
            operating_score: 0.5,
            bucket_bounds: [32.0 * 32.0, 96.0 * 96.0, 400.0 * 400.0],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), String> {
        let b = self.bucket_bounds;
        if !(0.0 < b[0] && b[0] < b[1] && b[1] < b[2]) {
            return Err("eval.bucket_bounds must be positive and strictly increasing".into());
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err("eval.iou_threshold must lie in (0, 1]".into());
        }
        Ok(())
    }
}

pub const BUCKET_NAMES: [&str; 3] = ["small", "medium", "large"];

/// Size bucket of an area, or `None` above the large bound.
pub fn bucket_of(area: f64, config: &EvalConfig) -> Option<usize> {
    config.bucket_bounds.iter().position(|&hi| area <= hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchLabel {
    pub true_positive: bool,
    /// Matched ground-truth index for true positives.
    pub gt: Option<usize>,
}

/// Greedy matching in descending score order (ties by the detection total
/// order). A detection is a true positive when an unmatched ground truth of
/// its class overlaps it with IoU ≥ `iou_threshold`; the best-overlapping
/// one (lowest index on ties) is consumed. Labels follow input order.
pub fn match_detections(dets: &[Detection], gts: &[AnnotatedObject], iou_threshold: f64) -> Vec<MatchLabel> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| detection_order(&dets[a], &dets[b]).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut labels = vec![
        MatchLabel {
            true_positive: false,
            gt: None
        };
        dets.len()
    ];
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class_id != d.class_id {
                continue;
            }
            let overlap = iou(&d.bbox, &gt.bbox);
            if overlap >= iou_threshold && best.is_none_or(|(_, v)| overlap > v) {
                best = Some((g, overlap));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            labels[i] = MatchLabel {
                true_positive: true,
                gt: Some(g),
            };
        }
    }
    labels
}

/// One image's detections and ground truth.
#[derive(Debug, Clone, Default)]
pub struct EvalImage {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<AnnotatedObject>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Dataset precision and recall over detections with score ≥ `score_threshold`.
pub fn precision_recall(images: &[EvalImage], score_threshold: f64, config: &EvalConfig) -> (f64, f64) {
    let (mut tp, mut fp, mut gts) = (0, 0, 0);
    for im in images {
        let kept: Vec<Detection> = im
            .detections
            .iter()
            .filter(|d| d.score >= score_threshold)
            .copied()
            .collect();
        for l in match_detections(&kept, &im.ground_truth, config.iou_threshold) {
            if l.true_positive {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        gts += im.ground_truth.len();
    }
    (ratio(tp, tp + fp), ratio(tp, gts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub ground_truths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub name: String,
    pub ground_truths: usize,
    pub operating_point: OperatingPoint,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub iou_threshold: f64,
    pub overall: BucketReport,
    pub buckets: Vec<BucketReport>,
    /// Ground truths larger than every bucket; counted only in `overall`.
    pub unbucketed_ground_truths: usize,
}

/// A scored detection after matching, tagged with the bucket it counts in.
struct Scored {
    score: f64,
    true_positive: bool,
    bucket: Option<usize>,
}

fn bucket_report(name: &str, scored: &[&Scored], ground_truths: usize, thresholds: &[f64], operating: f64) -> BucketReport {
    // `scored` is in descending score order, so each threshold selects a prefix
    let mut cum = Vec::with_capacity(scored.len() + 1);
    let (mut tp, mut fp) = (0, 0);
    cum.push((0, 0));
    for s in scored {
        if s.true_positive {
            tp += 1;
        } else {
            fp += 1;
        }
        cum.push((tp, fp));
    }
    let counts_at = |t: f64| cum[scored.partition_point(|s| s.score >= t)];
    let curve = thresholds
        .iter()
        .map(|&t| {
            let (tp, fp) = counts_at(t);
            CurvePoint {
                threshold: t,
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, ground_truths),
            }
        })
        .collect();
    let (tp, fp) = counts_at(operating);
    BucketReport {
        name: name.to_string(),
        ground_truths,
        operating_point: OperatingPoint {
            threshold: operating,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, ground_truths),
            true_positives: tp,
            false_positives: fp,
            ground_truths,
        },
        curve,
    }
}

/// Precision/recall at every distinct detection score ≥ `min_curve_score`,
/// overall and per size bucket, plus the operating point.
pub fn curve(images: &[EvalImage], config: &EvalConfig) -> CurveReport {
    let floor = config.min_curve_score.min(config.operating_score);
    let mut scored = Vec::new();
    let mut gt_counts = [0usize; 3];
    let mut unbucketed = 0;
    let mut total_gts = 0;
    for im in images {
        let kept: Vec<Detection> = im.detections.iter().filter(|d| d.score >= floor).copied().collect();
        let labels = match_detections(&kept, &im.ground_truth, config.iou_threshold);
        for (d, l) in kept.iter().zip(labels) {
            let area = match l.gt {
                Some(g) => im.ground_truth[g].bbox.area(),
                None => d.bbox.area(),
            };
            scored.push(Scored {
                score: d.score,
                true_positive: l.true_positive,
                bucket: bucket_of(area, config),
            });
        }
        for g in &im.ground_truth {
            total_gts += 1;
            match bucket_of(g.bbox.area(), config) {
                Some(b) => gt_counts[b] += 1,
                None => unbucketed += 1,
            }
        }
    }
    scored.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut thresholds: Vec<f64> = scored
        .iter()
        .map(|s| s.score)
        .filter(|&s| s >= config.min_curve_score)
        .collect();
    thresholds.reverse();
    thresholds.dedup();

    let all: Vec<&Scored> = scored.iter().collect();
    let overall = bucket_report("overall", &all, total_gts, &thresholds, config.operating_score);
    let buckets = BUCKET_NAMES
        .iter()
        .enumerate()
        .map(|(b, name)| {
            let part: Vec<&Scored> = scored.iter().filter(|s| s.bucket == Some(b)).collect();
            bucket_report(name, &part, gt_counts[b], &thresholds, config.operating_score)
        })
        .collect();
    CurveReport {
        iou_threshold: config.iou_threshold,
        overall,
        buckets,
        unbucketed_ground_truths: unbucketed,
    }
}

/// A line of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image: String,
    #[serde(flatten)]
    pub detection: Detection,
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<(), EvalError> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>, EvalError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Format {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let r: DetectionRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if !r.detection.bbox.is_valid() || !r.detection.score.is_finite() {
            return Err(err("detection box or score is not finite".into()));
        }
        out.push(r);
    }
    Ok(out)
}

/// Groups detections by image, in annotation order.
pub fn join_by_image(annotations: &[Annotation], detections: &[DetectionRecord]) -> Result<Vec<EvalImage>, EvalError> {
    let index: BTreeMap<&str, usize> = annotations
        .iter()
        .enumerate()
        .map(|(i, a)| (a.image_path.as_str(), i))
        .collect();
    let mut images: Vec<EvalImage> = annotations
        .iter()
        .map(|a| EvalImage {
            detections: Vec::new(),
            ground_truth: a.objects.clone(),
        })
        .collect();
    for r in detections {
        let i = *index
            .get(r.image.as_str())
            .ok_or_else(|| EvalError::UnknownImage(r.image.clone()))?;
        images[i].detections.push(r.detection);
    }
    Ok(images)
}

/// Writes `report.json` and one `curve_<bucket>.csv` per bucket into `dir`.
pub fn write_report(dir: &Path, report: &CurveReport) -> Result<(), EvalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = dir.join("report.json");
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    fs::write(&json, text).map_err(io_err(&json))?;
    for b in std::iter::once(&report.overall).chain(&report.buckets) {
        let path = dir.join(format!("curve_{}.csv", b.name));
        let name = path.display().to_string();
        let mut w = csv::Writer::from_path(&path).map_err(|e| EvalError::Csv(name.clone(), e))?;
        for p in &b.curve {
            w.serialize(p).map_err(|e| EvalError::Csv(name.clone(), e))?;
        }
        if b.curve.is_empty() {
            w.write_record(["threshold", "precision", "recall"])
                .map_err(|e| EvalError::Csv(name.clone(), e))?;
        }
        w.flush().map_err(io_err(&path))?;
    }
    Ok(())
}
