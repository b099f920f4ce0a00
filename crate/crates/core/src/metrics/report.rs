use serde::{Deserialize, Serialize};

use super::{accuracy_rmse, adjacent_label_gap, per_label_accuracy, MetricsError};
use crate::mcd::SplitProvenance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub label: usize,
    pub support: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingSummary {
    pub questions: usize,
    /// `None` when every predicted score was zero.
    pub ground_p: Option<f64>,
    /// `None` when no question had ground-truth boxes.
    pub ap: Option<f64>,
    pub ap_threshold: f64,
    /// How AP was aggregated over questions.
    pub ap_pooling: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub checkpoint_hash: String,
    pub split: Option<SplitProvenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub set: String,
    pub size: usize,
    pub accuracy: f64,
    pub rmse: f64,
    pub per_label: Vec<LabelRow>,
    pub adjacent_gap: Option<f64>,
    pub grounding: Option<GroundingSummary>,
    pub provenance: ReportProvenance,
}

impl EvalReport {
    /// Builds the report and verifies accuracy and RMSE against a direct
    /// recomputation before returning it.
    pub fn from_predictions(
        set: &str,
        predicted: &[usize],
        fractional: &[f64],
        labels: &[usize],
        provenance: ReportProvenance,
    ) -> Result<Self, MetricsError> {
        let (accuracy, rmse) = accuracy_rmse(predicted, fractional, labels)?;
        let per = per_label_accuracy(predicted, labels)?;
        let report = Self {
            set: set.to_string(),
            size: labels.len(),
            accuracy,
            rmse,
            adjacent_gap: adjacent_label_gap(&per),
            per_label: per
                .into_iter()
                .map(|(label, a)| LabelRow {
                    label,
                    support: a.support,
                    accuracy: a.accuracy,
                })
                .collect(),
            grounding: None,
            provenance,
        };
        report.self_check(predicted, fractional, labels)?;
        Ok(report)
    }

    pub fn self_check(&self, predicted: &[usize], fractional: &[f64], labels: &[usize]) -> Result<(), MetricsError> {
        let n = labels.len() as f64;
        let acc = 100.0 * labels.iter().zip(predicted).filter(|(l, p)| l == p).count() as f64 / n;
        let rmse = (labels
            .iter()
            .zip(fractional)
            .map(|(&l, c)| (l as f64 - c) * (l as f64 - c))
            .sum::<f64>()
            / n)
            .sqrt();
        if (acc - self.accuracy).abs() > 1e-9 || (rmse - self.rmse).abs() > 1e-9 {
            return Err(MetricsError::SelfCheck(format!(
                "reported ({}, {}) vs recomputed ({acc}, {rmse})",
                self.accuracy, self.rmse
            )));
        }
        let support: usize = self.per_label.iter().map(|r| r.support).sum();
        if support != labels.len() || self.size != labels.len() {
            return Err(MetricsError::SelfCheck(
                "per-label support does not cover the set".into(),
            ));
        }
        if self.per_label.iter().any(|r| !(0.0..=100.0).contains(&r.accuracy))
            || !(0.0..=100.0).contains(&self.accuracy)
        {
            return Err(MetricsError::SelfCheck("accuracy outside [0, 100]".into()));
        }
        Ok(())
    }

    /// `label,support,accuracy` rows, one per supported label.
    pub fn per_label_csv(&self) -> Result<String, MetricsError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.per_label {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| MetricsError::Invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| MetricsError::Invalid(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String, MetricsError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, MetricsError> {
        Ok(serde_json::from_str(s)?)
    }
}
