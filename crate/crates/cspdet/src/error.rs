use std::path::Path;

/// Failure of a subcommand, classified by the exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Other(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }

    /// Invalid arguments from the core surface as config errors, numeric
    /// trouble as numeric failures, everything else as bad data.
    pub fn from_core(e: cspdet_core::Error) -> Self {
        use cspdet_core::Error as E;
        match e {
            E::InvalidArgument(m) => CliError::Config(m),
            E::Numeric(m) => CliError::Numeric(m),
            other => CliError::Data(other.to_string()),
        }
    }

    /// Core errors raised while handling data rather than configuration.
    pub fn data(e: cspdet_core::Error) -> Self {
        match e {
            cspdet_core::Error::Numeric(m) => CliError::Numeric(m),
            other => CliError::Data(other.to_string()),
        }
    }
}
