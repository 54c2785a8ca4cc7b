use std::fmt::Display;
use std::path::Path;

/// Failure of a command, classified for the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    /// 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub(crate) fn core(context: impl Display, e: tmbench_core::Error) -> Self {
        let message = format!("{context}: {e}");
        if e.is_numerical() {
            CliError::Numerical(message)
        } else {
            CliError::Data(message)
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<tmbench_core::Error> for CliError {
    fn from(e: tmbench_core::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
