//! Temporal grounding metrics: IoU, "R@n, IoU = mu", and mIoU.
//!
//! A retrieval is correct when its IoU with ground truth is strictly larger
//! than the threshold. Index spans are inclusive, so a single-index moment
//! has length 1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datamodel::{BoundaryIndices, TimeInterval};
use crate::error::{Error, Result};

pub const IOU_THRESHOLDS: [f64; 4] = [0.1, 0.3, 0.5, 0.7];

/// A prediction or gold moment in either representation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Span {
    Time(TimeInterval),
    Index(BoundaryIndices),
}

pub fn iou_time(a: &TimeInterval, b: &TimeInterval) -> f64 {
    let inter = (a.end_s.min(b.end_s) - a.start_s.max(b.start_s)).max(0.0);
    let union = (a.end_s - a.start_s) + (b.end_s - b.start_s) - inter;
    if union <= 0.0 {
        // two degenerate point intervals
        return if a.start_s == b.start_s && a.end_s == b.end_s { 1.0 } else { 0.0 };
    }
    inter / union
}

pub fn iou_index(a: &BoundaryIndices, b: &BoundaryIndices) -> f64 {
    let inter = (a.i_end.min(b.i_end) + 1).saturating_sub(a.i_start.max(b.i_start));
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Intersection over union of two same-kind spans.
pub fn iou(a: &Span, b: &Span) -> Result<f64> {
    match (a, b) {
        (Span::Time(x), Span::Time(y)) => Ok(iou_time(x, y)),
        (Span::Index(x), Span::Index(y)) => Ok(iou_index(x, y)),
        _ => Err(Error::KindMismatch),
    }
}

/// Percentage of examples whose top-`n` predictions contain at least one
/// span with IoU strictly greater than `mu`.
pub fn recall_at_n(predictions: &[Vec<Span>], golds: &[Span], n: usize, mu: f64) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::Config("recall over an empty gold set".into()));
    }
    if predictions.len() != golds.len() {
        return Err(Error::Config(format!(
            "prediction/gold length mismatch: {} vs {}",
            predictions.len(),
            golds.len()
        )));
    }
    if n == 0 {
        return Err(Error::Config("n must be >= 1".into()));
    }
    let mut hits = 0usize;
    for (preds, gold) in predictions.iter().zip(golds) {
        if preds.is_empty() {
            return Err(Error::Config("an example has no predictions".into()));
        }
        let mut best = 0.0f64;
        for p in preds.iter().take(n) {
            best = best.max(iou(p, gold)?);
        }
        if best > mu {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / golds.len() as f64)
}

/// Mean top-1 IoU over the set, as a percentage.
pub fn mean_iou(predictions: &[Span], golds: &[Span]) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::Config("mean IoU over an empty gold set".into()));
    }
    if predictions.len() != golds.len() {
        return Err(Error::Config(format!(
            "prediction/gold length mismatch: {} vs {}",
            predictions.len(),
            golds.len()
        )));
    }
    let mut sum = 0.0;
    for (p, g) in predictions.iter().zip(golds) {
        sum += iou(p, g)?;
    }
    Ok(100.0 * sum / golds.len() as f64)
}

/// R@1 at the standard thresholds plus mIoU over a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r1_iou: BTreeMap<String, f64>,
    pub mean_iou: f64,
    pub n_examples: usize,
}

impl EvalReport {
    pub fn r1(&self, mu: f64) -> f64 {
        self.r1_iou.get(&format!("{mu}")).copied().unwrap_or(0.0)
    }

    pub fn csv_header() -> String {
        let cols: Vec<String> =
            IOU_THRESHOLDS.iter().map(|mu| format!("R1@IoU={mu}")).collect();
        format!("model,{},mIoU", cols.join(","))
    }

    pub fn csv_row(&self, model: &str) -> String {
        let cols: Vec<String> =
            IOU_THRESHOLDS.iter().map(|mu| format!("{:.2}", self.r1(*mu))).collect();
        format!("{model},{},{:.2}", cols.join(","), self.mean_iou)
    }
}

/// Evaluate top-1 index predictions against gold indices.
pub fn evaluate_spans(
    predictions: &[BoundaryIndices],
    golds: &[BoundaryIndices],
) -> Result<EvalReport> {
    let preds: Vec<Vec<Span>> = predictions.iter().map(|p| vec![Span::Index(*p)]).collect();
    let top1: Vec<Span> = predictions.iter().map(|p| Span::Index(*p)).collect();
    let gold_spans: Vec<Span> = golds.iter().map(|g| Span::Index(*g)).collect();
    let mut r1_iou = BTreeMap::new();
    for mu in IOU_THRESHOLDS {
        r1_iou.insert(format!("{mu}"), recall_at_n(&preds, &gold_spans, 1, mu)?);
    }
    Ok(EvalReport {
        r1_iou,
        mean_iou: mean_iou(&top1, &gold_spans)?,
        n_examples: golds.len(),
    })
}
