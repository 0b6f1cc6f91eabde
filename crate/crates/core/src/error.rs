use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed json: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// A single video record failed validation.
    #[error("video {id}: {reason}")]
    Video { id: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("synthetic generation failed for {video}: {reason}")]
    Generation { video: String, reason: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("evaluation input: {0}")]
    Evaluation(String),

    /// Non-finite loss or gradient; carries the ids of the offending batch.
    #[error("numerical failure at step {step}: {reason} (batch: {})", batch.join(", "))]
    Numerical {
        step: u64,
        reason: String,
        batch: Vec<String>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn video(id: &str, reason: impl Into<String>) -> Self {
        Error::Video {
            id: id.to_string(),
            reason: reason.into(),
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. })
    }
}
