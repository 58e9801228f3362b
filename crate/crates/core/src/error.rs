use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// A prerequisite artifact (usually an earlier stage checkpoint) is absent.
    #[error("missing dependency: {0}")]
    MissingDependency(String),

    #[error("training diverged: loss term `{term}` is {value}")]
    Divergence { term: String, value: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("parse error in {what}: {msg}")]
    Parse { what: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
