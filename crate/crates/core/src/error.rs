use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
///
/// Variants map one-to-one onto the failure classes the command line
/// reports through distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("degenerate input: row {row} has norm {norm:e}")]
    Degenerate { row: usize, norm: f64 },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("numerical divergence at {stage} {index}")]
    Divergence { stage: &'static str, index: usize },

    #[error("data mismatch: {0}")]
    Mismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
