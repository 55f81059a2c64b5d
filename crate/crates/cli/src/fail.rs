//! Command failures and their process exit codes.

use std::fmt;
use std::path::Path;

use morphgrad::Error;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;
pub const EXIT_VERIFICATION: u8 = 5;

#[derive(Debug)]
pub enum Failure {
    Lib(Error),
    /// Missing or inconsistent experiment outputs.
    Missing(String),
    Verification(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Lib(e) => match e {
                Error::Config(_) | Error::Usage(_) | Error::Shape { .. } | Error::Json(_) => {
                    EXIT_CONFIG
                }
                Error::Io { .. } | Error::Format { .. } | Error::Truncated { .. } => EXIT_IO,
                Error::Domain { .. } | Error::Numerical { .. } | Error::NonFinite(_) => {
                    EXIT_NUMERICAL
                }
            },
            Failure::Missing(_) => EXIT_NUMERICAL,
            Failure::Verification(_) => EXIT_VERIFICATION,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Failure::Lib(Error::Config(msg.into()))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Lib(e) => e.fmt(f),
            Failure::Missing(m) | Failure::Verification(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

pub fn io_error(path: &Path, source: std::io::Error) -> Failure {
    Failure::Lib(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn csv_error(path: &Path, e: csv::Error) -> Failure {
    let source = match e.into_kind() {
        csv::ErrorKind::Io(io) => io,
        other => std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{other:?}")),
    };
    io_error(path, source)
}

/// Reads a UTF-8 JSON file into `T`; parse errors are configuration errors.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

pub fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| io_error(path, e))
}
