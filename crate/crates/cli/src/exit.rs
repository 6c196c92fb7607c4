use std::fmt;

use mtair::Error;

/// Process exit codes. Listed in `mtair --help`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ExitCode {
    Ok = 0,
    Other = 1,
    Usage = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    CheckFailed = 6,
}

pub const EXIT_CODE_HELP: &str = "\
Exit codes:
  0  success
  1  other failure (numerical divergence, internal error)
  2  usage error or invalid configuration
  3  I/O error (missing or unreadable file, write failure)
  4  format error (bad PNG or weight file, CRC mismatch)
  5  shape error (image or weight shapes do not match the configuration)
  6  a check, gradient check or benchmark bound failed";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Format(String),
    Shape(String),
    /// A verification command ran to completion and reported failures.
    CheckFailed(String),
    Other(String),
}

impl CliError {
    pub fn io(path: impl fmt::Display, e: std::io::Error) -> Self {
        CliError::Io(format!("{path}: {e}"))
    }

    pub fn code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::Usage,
            CliError::Io(_) => ExitCode::Io,
            CliError::Format(_) => ExitCode::Format,
            CliError::Shape(_) => ExitCode::Shape,
            CliError::CheckFailed(_) => ExitCode::CheckFailed,
            CliError::Other(_) => ExitCode::Other,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("usage", m),
            CliError::Io(m) => ("i/o", m),
            CliError::Format(m) => ("format", m),
            CliError::Shape(m) => ("shape", m),
            CliError::CheckFailed(m) => ("check failed", m),
            CliError::Other(m) => ("error", m),
        };
        write!(f, "{kind}: {msg}")
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e.root() {
            Error::Io(_) => CliError::Io(msg),
            Error::Format(_) | Error::Checksum { .. } => CliError::Format(msg),
            Error::Shape(_) | Error::ParamShape { .. } | Error::MissingParam(_) => CliError::Shape(msg),
            Error::Config(_) | Error::InvalidArgument(_) => CliError::Usage(msg),
            _ => CliError::Other(msg),
        }
    }
}
