use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("pack error: value {value} at index {index} outside [{min}, {max}] for {bits}-bit")]
    Pack {
        index: usize,
        value: i32,
        bits: u8,
        min: i32,
        max: i32,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Checkpoint decoding failures. Each variant is a distinct failure class so
/// callers (and the CLI exit path) can tell them apart.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {found:?}, expected \"ILQ1\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("malformed checkpoint metadata: {0}")]
    Metadata(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
