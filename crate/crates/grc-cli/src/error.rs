//! CLI error wrapper mapping failure classes to exit codes.
//!
//! 0 success, 2 configuration problems, 3 numeric failures, 4 file and
//! format problems. Core errors keep their class; filesystem errors are
//! wrapped with the path they concern.

use std::fmt;
use std::path::Path;

use grc_core::Error;

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Io(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 4,
            CliError::Core(Error::Format(_)) => 4,
            CliError::Core(Error::Numeric(_)) | CliError::Core(Error::Oracle(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_map_to_documented_codes() {
        assert_eq!(CliError::Core(Error::config("x")).exit_code(), 2);
        assert_eq!(CliError::Core(Error::data("x")).exit_code(), 2);
        assert_eq!(CliError::Core(Error::numeric("x")).exit_code(), 3);
        assert_eq!(CliError::Core(Error::oracle("x")).exit_code(), 3);
        assert_eq!(CliError::Core(Error::format("x")).exit_code(), 4);
        assert_eq!(CliError::Io("gone".into()).exit_code(), 4);
    }
}
