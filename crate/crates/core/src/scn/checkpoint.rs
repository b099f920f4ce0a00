use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::ModelParameters;
use super::train::TrainConfig;
use super::{ModelConfig, ScnError};
use crate::mcd::SplitProvenance;
use crate::tensor::ParamSet;

pub const CHECKPOINT_FORMAT: &str = "countlab-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointProvenance {
    pub dataset_hash: String,
    pub split: Option<SplitProvenance>,
    pub trainer: Option<TrainConfig>,
    pub seed: u64,
}

/// Parameters plus the config that shaped them and where they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: ParamSet,
    pub provenance: CheckpointProvenance,
}

impl Checkpoint {
    pub fn new(model: &ModelParameters, provenance: CheckpointProvenance) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            params: model.params().clone(),
            provenance,
        }
    }

    pub fn to_json(&self) -> Result<String, ScnError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ScnError> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(ScnError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        ModelParameters::from_parts(c.config.clone(), c.params.clone())?;
        Ok(c)
    }

    /// The model, provided the stored config equals `expected`.
    pub fn model(&self, expected: &ModelConfig) -> Result<ModelParameters, ScnError> {
        if &self.config != expected {
            return Err(ScnError::Checkpoint(
                "stored config differs from the requested config".into(),
            ));
        }
        ModelParameters::from_parts(self.config.clone(), self.params.clone())
    }

    /// The model under its own stored config.
    pub fn stored_model(&self) -> Result<ModelParameters, ScnError> {
        self.model(&self.config)
    }

    pub fn hash(&self) -> Result<String, ScnError> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }
}
