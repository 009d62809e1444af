use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulator and trainer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("probability {p} is unreachable (must lie in ({floor}, 1))")]
    UnreachableProbability { p: f64, floor: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Failures of a [`crate::network::SynapseBackend`].
///
/// Transport failures (the device could not be reached) are kept apart from
/// device failures (the device answered with an error).
#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("device error: {0}")]
    Device(String),
}

/// Dataset ingestion failures.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { found: u32, expected: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("dimension overflow in IDX header")]
    DimensionOverflow,

    #[error("label {label} at index {index} is out of range (must be < 10)")]
    BadLabel { index: usize, label: u8 },

    #[error("missing dataset files in {dir}: {missing:?}")]
    MissingFiles { dir: PathBuf, missing: Vec<String> },

    #[error("checksum mismatch for {file}: expected {expected}, got {actual}")]
    Checksum {
        file: String,
        expected: String,
        actual: String,
    },

    #[error("dataset cache is invalid: {0}")]
    BadCache(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
