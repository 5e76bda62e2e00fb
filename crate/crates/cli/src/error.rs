use std::fmt;
use std::path::Path;

use dal_core::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;
pub const EXIT_DIVERGENCE: i32 = 5;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Verification(String),
    Core(Error),
}

impl CliError {
    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Verification(_) => EXIT_VERIFY,
            CliError::Core(e) => match e {
                Error::Io(_) | Error::Format { .. } | Error::Csv(_) => EXIT_IO,
                Error::Divergence { .. } => EXIT_DIVERGENCE,
                Error::Dimension(_) | Error::Config(_) | Error::Domain(_) | Error::Usage(_) | Error::Json(_) => {
                    EXIT_CONFIG
                }
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

/// Attaches the path to core I/O and format errors, keeping their kind.
pub fn at(path: &Path) -> impl FnOnce(Error) -> CliError + '_ {
    move |e| match e {
        Error::Io(io) => CliError::io(path, io),
        Error::Format { offset, message } => {
            CliError::Io(format!("{}: format error at byte {offset}: {message}", path.display()))
        }
        other => CliError::Core(other),
    }
}
