//! Error type shared across the pipeline.

use crate::types::SourceId;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("measurement rejected: {0}")]
    RejectedMeasurement(String),

    #[error("missing element: {0}")]
    MissingElement(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("duplicate record: stone {stone_id} at evaluation time {evaluation_time}")]
    DuplicateRecord {
        stone_id: String,
        evaluation_time: i64,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("no usable data: {0}")]
    NoUsableData(String),

    #[error("missing source statistics for {0}")]
    MissingSourceStatistics(SourceId),

    #[error("calibration infeasible: {0}")]
    CalibrationInfeasible(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("generation failed: {0}")]
    GenerationFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 for validation problems, 2 for
    /// runtime/numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_)
            | Error::InsufficientData(_)
            | Error::RejectedMeasurement(_)
            | Error::MissingElement(_)
            | Error::Parse { .. }
            | Error::DuplicateRecord { .. }
            | Error::Shape(_)
            | Error::InvalidBatch(_)
            | Error::InvalidConfig(_)
            | Error::MissingSourceStatistics(_)
            | Error::MissingArtifact(_) => 1,
            Error::Numerical(_)
            | Error::NoUsableData(_)
            | Error::CalibrationInfeasible(_)
            | Error::GenerationFailed(_)
            | Error::Io(_) => 2,
        }
    }
}
