//! Count-distribution shift protocol.
//!
//! A validation set is carved from the training pool by whole images, then a
//! parity strategy thins one label parity out of train/validation and the
//! other parity out of test. Membership is a pure function of the dataset
//! hash, the carve seed, the strategy and the strategy seed.

mod split;
mod stats;

pub use split::{
    apply_strategy, base_split, carve_validation, count_histogram, dataset_labels, replay_split, DatasetSplit,
    SplitProvenance, SplitStrategy, StrategyKind, TrainingView,
};
pub use stats::{bhattacharyya, split_report, tally_similarity, DistributionStats, SetStats};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum McdError {
    #[error("validation fraction {0} must lie in (0, 1)")]
    InvalidFraction(f64),
    #[error("need at least two images to carve an image-disjoint validation set, found {0}")]
    TooFewImages(usize),
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("unknown triplet id {0}")]
    UnknownId(usize),
    #[error("sets overlap: {0}")]
    Overlap(String),
    #[error("distribution: {0}")]
    Distribution(String),
    #[error("dataset hash {found} does not match provenance {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
