use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing value at row {row}, column '{column}'")]
    MissingValue { row: usize, column: String },

    #[error("non-numeric cell '{value}' at row {row}, column '{column}' has no encoding rule")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("target column '{0}' not found")]
    MissingTarget(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("partition '{0}' would be empty")]
    EmptyPartition(&'static str),

    #[error("empty mixture: every log-term is -inf")]
    EmptyMixture,

    #[error("non-finite gradient in parameter '{0}'")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("reports mix datasets '{0}' and '{1}'")]
    MixedDatasets(String, String),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 1,
            Error::Divergence { .. } | Error::NonFiniteGradient(_) | Error::EmptyMixture => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
