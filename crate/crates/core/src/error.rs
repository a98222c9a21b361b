use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: usize,
        found: usize,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("non-finite values in {location}")]
    Numeric { location: String },
    #[error("invalid state: {0}")]
    State(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("degenerate batch in {op}: {count} values per channel, need at least 2")]
    DegenerateBatch { op: &'static str, count: usize },
    #[error("parse error at line {line}: {message}")]
    ParseLine { line: usize, message: String },
    #[error("parse error at byte {offset}: {message}")]
    ParseOffset { offset: usize, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
            expected,
            found,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
