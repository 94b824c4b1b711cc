//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// An input violated an operation precondition.
    #[error("rejected input: {0}")]
    RejectedInput(String),

    /// A configuration the toolkit does not support (e.g. speaker counts other than 2).
    #[error("unsupported configuration: {0}")]
    UnsupportedConfig(String),

    /// A value that is mathematically undefined for the given input.
    #[error("undefined value: {0}")]
    UndefinedValue(String),

    /// Training diverged (NaN/inf loss).
    #[error("training diverged: {0}")]
    Divergence(String),

    /// Bad experiment configuration.
    #[error("bad config: {0}")]
    Config(String),

    /// Malformed or missing data artifact.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 bad config, 3 data error, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnsupportedConfig(_) => 2,
            Error::Divergence(_) => 4,
            _ => 3,
        }
    }
}
