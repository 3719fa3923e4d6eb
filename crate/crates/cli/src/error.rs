use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{artifact} was produced under config digest {found}, current config gives {expected}; rerun the producing stage")]
    DigestMismatch {
        artifact: PathBuf,
        expected: String,
        found: String,
    },

    #[error(transparent)]
    Core(#[from] trafficlm::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(trafficlm::Error::MissingArtifact(_)) => 3,
            CliError::Core(trafficlm::Error::Io(_)) => 1,
            _ => 4,
        }
    }
}
