use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dataset is empty after filtering")]
    EmptyAfterFiltering,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("optimizer diverged at epoch {epoch}: objective {objective}")]
    Divergence { epoch: usize, objective: f64 },

    #[error("unknown user {0:?}; run the interview flow or pass a profile")]
    UnknownUser(String),

    #[error("unknown item {0:?}")]
    UnknownItem(String),

    #[error("session state error: {0}")]
    State(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation(_)
                | Error::Config(_)
                | Error::UnknownUser(_)
                | Error::UnknownItem(_)
        )
    }
}

/// Failures specific to reading a model file.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unsupported model format version {found} (this build reads up to {supported})")]
    Version { found: u32, supported: u32 },

    #[error("model checksum failure: {0}")]
    Checksum(String),

    #[error("model schema violation: {0}")]
    Schema(String),
}
