//! Error type shared across the library, with stable machine-readable codes
//! for the CLI layer.

use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad hyperparameters, shape mismatches between
    /// configured dimensions, out-of-range arguments.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid or unusable data: malformed layouts, empty corpora, label ids
    /// outside the configured class set.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint serialization problems: bad magic, checksum mismatch,
    /// truncated files, incompatible dimensions.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A numerical routine produced NaN or infinity where finite values are
    /// required (fail-fast guard in the denoiser and training loop).
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training diverged (loss grew far beyond its initial value and stayed
    /// there).
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code, used by the CLI in `error[CODE]: ...`
    /// lines and mapped to process exit codes.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "E_CONFIG",
            Error::Data(_) => "E_DATA",
            Error::Checkpoint(_) => "E_CHECKPOINT",
            Error::NonFinite(_) => "E_NONFINITE",
            Error::Diverged(_) => "E_DIVERGED",
            Error::Io(_) => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }

    /// Process exit code for the CLI. 0 is success; 1 is reserved for
    /// argument-parsing failures (clap's default is 2, remapped in main).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 3,
            Error::Data(_) => 4,
            Error::Checkpoint(_) => 5,
            Error::NonFinite(_) => 6,
            Error::Diverged(_) => 7,
            Error::Io(_) => 8,
            Error::Json(_) => 9,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
