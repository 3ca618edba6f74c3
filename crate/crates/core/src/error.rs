use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid hyperparameter, shape or architecture setting.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad or missing input data (labels out of range, missing annotations, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Ingestion failure for a specific file.
    #[error("failed to ingest {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    /// NaN or infinity detected; `site` names the layer or loss term.
    #[error("non-finite values in {site}")]
    NonFinite { site: String },

    /// Malformed interventions or lookups.
    #[error("request error: {0}")]
    Request(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("estimator unreliable: {0}")]
    Estimator(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn non_finite(site: impl Into<String>) -> Self {
        Error::NonFinite { site: site.into() }
    }
}
