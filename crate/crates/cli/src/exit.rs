use std::fmt;
use std::path::Path;

use avseg_core::Error;

pub const CONFIG: u8 = 2;
pub const IO: u8 = 3;
pub const DIVERGENCE: u8 = 4;
pub const MISMATCH: u8 = 5;

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::new(IO, format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Param(_) | Error::Config(_) => CONFIG,
            Error::Io { .. } | Error::Json { .. } | Error::Format(_) => IO,
            Error::Divergence { .. } => DIVERGENCE,
            Error::Mismatch(_) | Error::Shape { .. } | Error::Data(_) | Error::Contract(_) => {
                MISMATCH
            }
        };
        CliError::new(code, e.to_string())
    }
}
