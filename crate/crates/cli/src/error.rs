use thiserror::Error;

/// Exit status 2 for usage and configuration problems, 1 for failures
/// while running.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(atac_core::Error),
}

impl From<atac_core::Error> for CliError {
    fn from(e: atac_core::Error) -> Self {
        match e {
            atac_core::Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Run(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
