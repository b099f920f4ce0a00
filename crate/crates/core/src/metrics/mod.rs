//! Counting accuracy, grounding precision and detection AP.

mod ap;
mod grounding;
mod report;

pub use ap::{average_precision, class_pooled_ap, ApImage, DEFAULT_AP_THRESHOLD};
pub use grounding::{ground_p, rect_union_area, rect_union_intersection, region_precision, GroundingEval};
pub use report::{EvalReport, GroundingSummary, LabelRow, ReportProvenance};

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no predictions to evaluate")]
    Empty,
    #[error("length mismatch: {0} predictions vs {1} labels")]
    Length(usize, usize),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("report self-check failed: {0}")]
    SelfCheck(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Accuracy in percent over rounded labels and RMSE over the fractional
/// counts, before rounding.
pub fn accuracy_rmse(predicted: &[usize], fractional: &[f64], labels: &[usize]) -> Result<(f64, f64), MetricsError> {
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    for len in [predicted.len(), fractional.len()] {
        if len != labels.len() {
            return Err(MetricsError::Length(len, labels.len()));
        }
    }
    let n = labels.len() as f64;
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    let se: f64 = fractional
        .iter()
        .zip(labels)
        .map(|(c, &l)| (c - l as f64).powi(2))
        .sum();
    Ok((100.0 * correct as f64 / n, (se / n).sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelAccuracy {
    pub support: usize,
    pub accuracy: f64,
}

/// Accuracy within each true-label bucket. Labels that never occur are absent.
pub fn per_label_accuracy(
    predicted: &[usize],
    labels: &[usize],
) -> Result<BTreeMap<usize, LabelAccuracy>, MetricsError> {
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    if predicted.len() != labels.len() {
        return Err(MetricsError::Length(predicted.len(), labels.len()));
    }
    let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&p, &l) in predicted.iter().zip(labels) {
        let e = tally.entry(l).or_default();
        e.0 += usize::from(p == l);
        e.1 += 1;
    }
    Ok(tally
        .into_iter()
        .map(|(l, (c, s))| {
            (
                l,
                LabelAccuracy {
                    support: s,
                    accuracy: 100.0 * c as f64 / s as f64,
                },
            )
        })
        .collect())
}

/// Mean `|acc(k) - acc(k+1)|` over consecutive labels that are both present;
/// `None` if no such pair exists.
pub fn adjacent_label_gap(per_label: &BTreeMap<usize, LabelAccuracy>) -> Option<f64> {
    let gaps: Vec<f64> = per_label
        .iter()
        .filter_map(|(k, a)| per_label.get(&(k + 1)).map(|b| (a.accuracy - b.accuracy).abs()))
        .collect();
    (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64)
}
