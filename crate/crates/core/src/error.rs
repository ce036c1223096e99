use std::path::PathBuf;

/// Errors produced anywhere in the search / train pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("I/O error at {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("truncated file {path:?}: expected {expected} bytes at offset {offset}")]
    Truncated {
        path: PathBuf,
        offset: u64,
        expected: usize,
    },
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("incompatible format version: found {found}, expected {expected}")]
    Incompatible { found: u32, expected: u32 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 validation/usage, 2 numerical check, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Truncated { .. } | Error::Corrupt(_) => 3,
            Error::Incompatible { .. } | Error::Parse(_) => 3,
            Error::Numerical(_) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
