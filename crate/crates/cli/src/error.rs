use std::io;

use reconprune::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, bad config values or missing inputs.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::BadImageSize(_) | Error::BadMaskSize(_) | Error::DimMismatch(_) => 2,
                Error::Io(io) if io.kind() == io::ErrorKind::NotFound => 2,
                _ => 1,
            },
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}
