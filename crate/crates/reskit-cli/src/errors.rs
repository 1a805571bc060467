//! Exit-code policy: 0 success (including flagged fits), 2 input error,
//! 3 internal numerical failure.

use reskit::kinetic::KineticError;
use reskit::nonlin::NonlinError;
use reskit::powersweep::SweepError;
use reskit::respipe::PipeError;
use reskit::sigmodel::ModelError;
use reskit::xrd::XrdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad inputs: missing files, malformed CSV/JSON, config violations.
    #[error("{0}")]
    Input(String),
    /// A numerical routine failed on inputs that passed validation.
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

/// Splits library errors into input-side (the data violates a precondition)
/// and numerical failures.
pub fn from_pipe(e: PipeError, context: &str) -> CliError {
    match &e {
        PipeError::Num(_) => CliError::Internal(format!("{context}: {e}")),
        PipeError::Stage { source, .. } if matches!(**source, PipeError::Num(_)) => {
            CliError::Internal(format!("{context}: {e}"))
        }
        _ => CliError::Input(format!("{context}: {e}")),
    }
}

pub fn from_model(e: ModelError, context: &str) -> CliError {
    match e {
        ModelError::NoRoot(_) => CliError::Internal(format!("{context}: {e}")),
        _ => CliError::Input(format!("{context}: {e}")),
    }
}

pub fn from_sweep(e: SweepError, context: &str) -> CliError {
    match &e {
        SweepError::Num(_) => CliError::Internal(format!("{context}: {e}")),
        _ => CliError::Input(format!("{context}: {e}")),
    }
}

pub fn from_nonlin(e: NonlinError, context: &str) -> CliError {
    match &e {
        NonlinError::Num(_) => CliError::Internal(format!("{context}: {e}")),
        _ => CliError::Input(format!("{context}: {e}")),
    }
}

pub fn from_kinetic(e: KineticError, context: &str) -> CliError {
    CliError::Input(format!("{context}: {e}"))
}

pub fn from_xrd(e: XrdError, context: &str) -> CliError {
    match &e {
        XrdError::Num(_) => CliError::Internal(format!("{context}: {e}")),
        _ => CliError::Input(format!("{context}: {e}")),
    }
}
