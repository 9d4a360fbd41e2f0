use thiserror::Error;

use crate::apuf::OperatingCondition;
use crate::filter::ReliableBatch;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("operating condition {0} lies outside the declared envelope")]
    EnvelopeViolation(OperatingCondition),

    #[error("dimension mismatch: expected {expected} stages, got {found}")]
    Dimension { expected: usize, found: usize },

    #[error("invalid APUF instance: {0}")]
    InvalidInstance(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid stage assignment: {0}")]
    Assignment(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    /// The candidate budget ran out before the requested number of reliable
    /// challenges was found. The partial batch is kept.
    #[error(
        "candidate budget exhausted: found {} of {requested} reliable challenges after {} candidates",
        .batch.members.len(),
        .batch.candidates_examined
    )]
    PartialBatch {
        requested: usize,
        batch: Box<ReliableBatch>,
    },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
