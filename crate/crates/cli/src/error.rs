use std::path::Path;

/// A failure with its process exit code: 1 I/O, 2 configuration, 3 numeric.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub const EXIT_IO: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_IO,
            message: format!("{}: {err}", path.display()),
        }
    }
}

impl From<modulora::Error> for CliError {
    fn from(e: modulora::Error) -> Self {
        use modulora::Error::*;
        let code = match &e {
            Io { .. }
            | Format(_)
            | BadMagic { .. }
            | UnsupportedVersion { .. }
            | Truncated { .. } => EXIT_IO,
            Config(_) | Dimension(_) | Range(_) | Index(_) => EXIT_CONFIG,
            Numeric(_) | Contract(_) => EXIT_NUMERIC,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}
