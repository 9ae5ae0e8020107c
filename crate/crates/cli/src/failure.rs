use std::fmt;
use std::path::Path;

use node_adapter::Error;

/// Why a command stopped, and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// A verification ran and did not pass.
    Check(String),
    Usage(String),
    Core(Error),
}

impl Failure {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Failure::Core(Error::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Core(e) => match e {
                Error::Usage(_) | Error::Config(_) => 2,
                Error::Io { .. } | Error::Format { .. } => 3,
                Error::Divergence { .. } => 4,
                Error::Mismatch(_) | Error::Shape { .. } | Error::Degenerate { .. } | Error::Capacity(_) => 5,
            },
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Check(m) => write!(f, "check failed: {m}"),
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}
