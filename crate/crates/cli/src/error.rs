use std::path::Path;

use stochsyn_core::{BackendError, Error};

/// Failure of a command, classified by its exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Transport(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Transport(_) => 3,
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |e| CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Backend(BackendError::Transport(m)) => CliError::Transport(format!("transport error: {m}")),
            Error::Backend(BackendError::Device(m)) => CliError::Transport(format!("device error: {m}")),
            Error::InvalidArgument(_) | Error::Domain(_) | Error::UnreachableProbability { .. } => {
                CliError::Usage(e.to_string())
            }
            Error::Data(stochsyn_core::DataError::MissingFiles { dir, missing }) => CliError::Data(format!(
                "missing dataset files in {}: {}\n\
                 place the MNIST IDX files there (raw or .gz), point SYNAPSE_DATA_DIR at them, \
                 or run `synapse data --fetch`",
                dir.display(),
                missing.join(", ")
            )),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(format!("json error: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(format!("csv error: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
