use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("underdetermined alignment: {0}")]
    Underdetermined(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("input too short: {0}")]
    TooShort(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed WAV: {0}")]
    MalformedWav(String),

    #[error("unsupported WAV format: {0}")]
    UnsupportedWav(String),

    #[error("gradient error: {0}")]
    Backward(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
