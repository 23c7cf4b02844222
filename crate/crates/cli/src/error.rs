use std::process::ExitCode;

use qsr_core::Error;

/// Failure classes, each with its own exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        })
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::NonFinite(_)
            | Error::SamplerDiverged { .. }
            | Error::SingularFit { .. }
            | Error::NotPositiveDefinite(_)
            | Error::RankDeficient(_) => CliError::Numeric(msg),
            Error::Io(_) | Error::Format(_) | Error::Json(_) => CliError::Io(msg),
            Error::InvalidShOrder(_)
            | Error::NonUnitDirection { .. }
            | Error::DimensionMismatch(_)
            | Error::InvalidParameter(_)
            | Error::Shape { .. }
            | Error::TimestepOutOfRange { .. } => CliError::Config(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
