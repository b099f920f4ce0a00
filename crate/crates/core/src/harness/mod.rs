//! Experiment orchestration: config, runs, p-sweeps, the grounding study and
//! report emission.

mod config;
mod grounding;
mod report;
mod run;
mod stats;
mod sweep;

pub use config::{parse_kv, parse_override, Baselines, ExperimentConfig, GroundingConfig, SplitChoice};
pub use grounding::{grounding_study, GroundingComparison, GroundingRow, GroundingStudy};
pub use report::{
    emit_grounding, emit_report, emit_sweep, validate_record_json, Environment, Manifest, ManifestFile, SeedManifest,
    RUN_RECORD_SCHEMA,
};
pub use run::{
    build_dataset, build_split, evaluate, evaluate_grounding, grounding_set, reproduce, run_experiment,
    run_experiment_full, run_on, train_model, BaselineResult, RunOutput, RunRecord, ShiftSummary, SplitSizes, Timings,
    RECORD_FORMAT, RECORD_VERSION,
};
pub use stats::SeedSummary;
pub use sweep::{cell_config, sweep_p, SweepOptions, SweepRow, SweepSummaryRow, SweepTable};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Rejected before any work started.
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{stage} stage failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("record failed schema validation: {0}")]
    Schema(String),
    #[error("regenerated record differs from the original")]
    NotReproducible,
    #[error("io: {0}")]
    Io(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Inputs or results that failed a check, as opposed to failures while
    /// doing the work.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_) | HarnessError::Schema(_) | HarnessError::NotReproducible
        )
    }
}
