//! Ground-truth matching and recall/precision reports.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::ops::Add;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counting::Blob;
use crate::detect::{Detection, Source};
use crate::geometry::PixelBox;

pub const DEFAULT_IOU_MIN: f64 = 0.3;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("duplicate ground-truth id {0}")]
    DuplicateId(u32),
}

/// Reference boxes with unique instance ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    boxes: Vec<(u32, PixelBox)>,
}

impl GroundTruth {
    pub fn new(boxes: Vec<(u32, PixelBox)>) -> Result<Self, EvalError> {
        let mut seen = HashSet::new();
        for &(id, _) in &boxes {
            if !seen.insert(id) {
                return Err(EvalError::DuplicateId(id));
            }
        }
        Ok(Self { boxes })
    }

    pub fn boxes(&self) -> &[(u32, PixelBox)] {
        &self.boxes
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    /// For each prediction (input order), the index of the ground-truth box it claimed.
    pub assignment: Vec<Option<usize>>,
}

/// Greedy one-to-one matching.
///
/// Predictions are visited by descending score (input order breaks ties). Each claims the
/// unclaimed ground-truth box with the highest IoU, provided the boxes overlap and the IoU is
/// at least `iou_min`. A prediction that finds nothing, including a duplicate on an already
/// claimed vehicle, is a false positive.
pub fn match_detections(preds: &[Detection], gt: &GroundTruth, iou_min: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let gt_boxes: Vec<_> = gt.boxes.iter().map(|(_, b)| b.to_f64()).collect();
    let mut claimed = vec![false; gt_boxes.len()];
    let mut assignment = vec![None; preds.len()];
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gb) in gt_boxes.iter().enumerate() {
            if claimed[g] {
                continue;
            }
            let v = preds[p].bbox.iou(gb);
            if v > 0.0 && v >= iou_min && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            claimed[g] = true;
            assignment[p] = Some(g);
        }
    }
    let tp = assignment.iter().filter(|a| a.is_some()).count() as u64;
    MatchResult {
        tp,
        fp: preds.len() as u64 - tp,
        fn_: gt_boxes.len() as u64 - tp,
        assignment,
    }
}

/// Counts and rates for one method. Undefined rates are `None` (JSON `null`), never 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Vehicles reported by matching, `tp + fp`.
    pub counted: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    /// Count from the blob-size estimator, when the method has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimated_count: Option<u64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl EvalReport {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        Self {
            counted: tp + fp,
            tp,
            fp,
            fn_,
            recall: ratio(tp, tp + fn_),
            precision: ratio(tp, tp + fp),
            estimated_count: None,
        }
    }

    pub fn with_estimated_count(mut self, n: u64) -> Self {
        self.estimated_count = Some(n);
        self
    }

    pub fn ground_truth(&self) -> u64 {
        self.tp + self.fn_
    }
}

/// Sums counts across images and recomputes the rates.
impl Add for EvalReport {
    type Output = EvalReport;

    fn add(self, rhs: EvalReport) -> EvalReport {
        let mut r = EvalReport::from_counts(self.tp + rhs.tp, self.fp + rhs.fp, self.fn_ + rhs.fn_);
        r.estimated_count = match (self.estimated_count, rhs.estimated_count) {
            (Some(a), Some(b)) => Some(a + b),
            (a, b) => a.or(b),
        };
        r
    }
}

pub fn metrics(tp: i64, fp: i64, fn_: i64) -> Result<EvalReport, EvalError> {
    if tp < 0 || fp < 0 || fn_ < 0 {
        return Err(EvalError::InvalidArgument(format!(
            "counts must be non-negative, got tp={tp} fp={fp} fn={fn_}"
        )));
    }
    Ok(EvalReport::from_counts(tp as u64, fp as u64, fn_ as u64))
}

pub fn evaluate_run(preds: &[Detection], gt: &GroundTruth, iou_min: f64) -> EvalReport {
    let m = match_detections(preds, gt, iou_min);
    EvalReport::from_counts(m.tp, m.fp, m.fn_)
}

/// Segmentation blobs as score-1 detections over their bounding boxes.
pub fn blobs_to_detections(blobs: &[Blob]) -> Vec<Detection> {
    blobs
        .iter()
        .map(|b| Detection::new(b.bounds.to_f64(), 1.0, Source::Segmentation))
        .collect()
}

/// All `(tp, fp)` pairs that reproduce the given recall and precision percentages within
/// `tol_pct` percentage points for a ground truth of `gt_total` vehicles.
pub fn consistent_counts(recall_pct: f64, precision_pct: f64, gt_total: u64, tol_pct: f64) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    for tp in 0..=gt_total {
        let r = 100.0 * tp as f64 / gt_total as f64;
        if (r - recall_pct).abs() > tol_pct || tp == 0 {
            continue;
        }
        // precision = tp / (tp + fp)  =>  fp ≈ tp (100 - p) / p
        let p_hi = (precision_pct + tol_pct) / 100.0;
        let p_lo = (precision_pct - tol_pct) / 100.0;
        let fp_min = (tp as f64 * (1.0 - p_hi) / p_hi).floor().max(0.0) as u64;
        let fp_max = if p_lo > 0.0 {
            (tp as f64 * (1.0 - p_lo) / p_lo).ceil() as u64
        } else {
            u64::MAX
        };
        for fp in fp_min..=fp_max.min(fp_min + 10 * gt_total) {
            let p = 100.0 * tp as f64 / (tp + fp) as f64;
            if (p - precision_pct).abs() <= tol_pct {
                out.push((tp, fp));
            }
        }
    }
    out
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.1}%", 100.0 * v))
}

/// Plain-text table with one column per method.
pub fn format_table(columns: &[(&str, &EvalReport)]) -> String {
    let mut rows: Vec<(String, Vec<String>)> = vec![
        ("".into(), columns.iter().map(|(n, _)| n.to_string()).collect()),
        ("Counted vehicles".into(), columns.iter().map(|(_, r)| r.counted.to_string()).collect()),
    ];
    if columns.iter().any(|(_, r)| r.estimated_count.is_some()) {
        rows.push((
            "Estimated count".into(),
            columns
                .iter()
                .map(|(_, r)| r.estimated_count.map_or("-".into(), |n| n.to_string()))
                .collect(),
        ));
    }
    rows.extend([
        ("TP".into(), columns.iter().map(|(_, r)| r.tp.to_string()).collect()),
        ("FP".into(), columns.iter().map(|(_, r)| r.fp.to_string()).collect()),
        ("FN".into(), columns.iter().map(|(_, r)| r.fn_.to_string()).collect()),
        ("Recall".into(), columns.iter().map(|(_, r)| pct(r.recall)).collect()),
        ("Precision".into(), columns.iter().map(|(_, r)| pct(r.precision)).collect()),
    ]);
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
    let col_w: Vec<usize> = (0..columns.len())
        .map(|c| rows.iter().map(|(_, v)| v[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (label, values) in &rows {
        let _ = write!(out, "{label:<label_w$}");
        for (v, w) in values.iter().zip(&col_w) {
            let _ = write!(out, " | {v:>w$}");
        }
        out.push('\n');
    }
    out
}
