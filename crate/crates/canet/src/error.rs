//! Error type shared by the fallible surfaces (I/O, parsing, checkpoints,
//! dataset handling, training). Shape violations inside the math core are
//! programmer errors and panic with a diagnostic instead.

use std::fmt;
use std::path::PathBuf;

#[derive(Debug)]
pub enum Error {
    /// Filesystem failure, annotated with the path involved.
    Io { path: PathBuf, source: std::io::Error },
    /// Malformed PPM/PGM/JSON/manifest content.
    Parse(String),
    /// Checkpoint refused: bad magic, checksum, version or tensor shape.
    Checkpoint(String),
    /// Invalid configuration value.
    Config(String),
    /// Dataset problem: missing pairs, generation failure.
    Data(String),
    /// Training aborted (non-finite loss or gradient).
    Train(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "io error at {}: {}", path.display(), source),
            Error::Parse(m) => write!(f, "parse error: {m}"),
            Error::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Train(m) => write!(f, "training error: {m}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
