//! Spatial counting network.
//!
//! Regions are encoded, fused with the question, contextualised by one
//! self-attention head with a residual, fused with the question again and
//! scored by a sigmoid. The count is the sum of the region scores. The same
//! trunk can instead feed a softmax over count labels, and two single-modality
//! heads serve as baselines.

mod baseline;
mod checkpoint;
mod model;
mod train;

pub use baseline::{expected_random_accuracy, random_predictions};
pub use checkpoint::{Checkpoint, CheckpointProvenance, CHECKPOINT_FORMAT};
pub use model::{
    encode_inputs, forward_trace, fuse, loss, predict, round_count, score_regions, self_attend, triplet_loss,
    Attention, Bound, ForwardTrace, LossBreakdown, LossVars, ModelParameters, Prediction, RegionScoreSet,
};
pub use train::{train, EpochRecord, TrainConfig, TrainedModel, TrainingHistory};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::SceneSpec;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ScnError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input does not fit the model: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("score {0} escaped the clamp interval")]
    ClampViolation(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Per-region sigmoid scores summed into a count, trained with MSE.
    Regression,
    /// Mean-pooled trunk output into a softmax over `0..=max_label`.
    Classification,
    /// Softmax head over the question vector alone.
    QuestionOnly,
    /// Softmax head over mean-pooled encoded regions alone.
    ImageOnly,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Regression => "regression",
            HeadKind::Classification => "classification",
            HeadKind::QuestionOnly => "question-only",
            HeadKind::ImageOnly => "image-only",
        }
    }

    pub fn is_softmax(self) -> bool {
        self != HeadKind::Regression
    }

    /// Whether the head runs the fusion and attention trunk.
    pub fn uses_trunk(self) -> bool {
        matches!(self, HeadKind::Regression | HeadKind::Classification)
    }
}

impl std::str::FromStr for HeadKind {
    type Err = ScnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regression" => Ok(HeadKind::Regression),
            "classification" => Ok(HeadKind::Classification),
            "question-only" => Ok(HeadKind::QuestionOnly),
            "image-only" => Ok(HeadKind::ImageOnly),
            other => Err(ScnError::Config(format!("unknown head {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Length of the raw region feature vectors.
    pub feature_dim: usize,
    pub num_classes: usize,
    pub num_attributes: usize,
    pub d_v: usize,
    pub d_q: usize,
    /// Rank of the first bilinear fusion.
    pub fusion_dim: usize,
    /// Width of the fused vectors `m_i`.
    pub model_dim: usize,
    pub attention_dim: usize,
    pub heads: usize,
    /// Rank of the second bilinear fusion.
    pub fusion2_dim: usize,
    /// Hidden width of the softmax heads.
    pub classifier_dim: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub head: HeadKind,
    /// Softmax heads predict labels `0..=max_label`.
    pub max_label: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            num_classes: 6,
            num_attributes: 4,
            d_v: 16,
            d_q: 16,
            fusion_dim: 32,
            model_dim: 32,
            attention_dim: 16,
            heads: 1,
            fusion2_dim: 32,
            classifier_dim: 32,
            lambda: 1.0,
            epsilon: 1e-6,
            head: HeadKind::Regression,
            max_label: 12,
        }
    }
}

impl ModelConfig {
    /// Defaults sized to the vocabulary and features of `spec`.
    pub fn for_spec(spec: &SceneSpec) -> Self {
        Self {
            feature_dim: spec.feature_dim,
            num_classes: spec.num_classes,
            num_attributes: spec.num_attributes,
            max_label: spec.max_instances.max(12),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ScnError> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("num_classes", self.num_classes),
            ("d_v", self.d_v),
            ("d_q", self.d_q),
            ("fusion_dim", self.fusion_dim),
            ("model_dim", self.model_dim),
            ("attention_dim", self.attention_dim),
            ("fusion2_dim", self.fusion2_dim),
            ("classifier_dim", self.classifier_dim),
            ("max_label", self.max_label),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(ScnError::Config(format!("{name} must be positive")));
        }
        if self.heads != 1 {
            return Err(ScnError::Config(format!(
                "exactly one attention head supported, got {}",
                self.heads
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(ScnError::Config(format!(
                "lambda {} must be finite and >= 0",
                self.lambda
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(ScnError::Config(format!("epsilon {} outside (0, 0.5)", self.epsilon)));
        }
        Ok(())
    }

    /// Question tokens: 3 modes, then classes, attributes and 4 half-planes.
    pub fn vocab_size(&self) -> usize {
        3 + self.num_classes + self.num_attributes + 4
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.d_v = 0));
        assert!(bad(|c| c.heads = 2));
        assert!(bad(|c| c.lambda = -1.0));
        assert!(bad(|c| c.epsilon = 0.5));
        assert!(bad(|c| c.epsilon = 0.0));
    }

    #[test]
    fn head_names_round_trip() {
        for h in [
            HeadKind::Regression,
            HeadKind::Classification,
            HeadKind::QuestionOnly,
            HeadKind::ImageOnly,
        ] {
            assert_eq!(h.as_str().parse::<HeadKind>().unwrap(), h);
            assert_eq!(serde_json::to_string(&h).unwrap(), format!("\"{}\"", h.as_str()));
        }
    }
}
