use pointrl_core::Error as CoreError;
use thiserror::Error;

/// Failures of a run, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let message = e.to_string();
        match e {
            CoreError::Config(_) | CoreError::Precondition(_) => CliError::Config(message),
            CoreError::Ingestion { .. }
            | CoreError::Environment(_)
            | CoreError::Io(_)
            | CoreError::Json(_) => CliError::Data(message),
            CoreError::NumericalOverflow { .. }
            | CoreError::Consistency(_)
            | CoreError::Coverage { .. } => CliError::Numeric(message),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
