use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed text input. `line` is 1-based when the input is line oriented.
    #[error("parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, message: String },

    #[error("caption parse error at token {position} ({token:?}): {message}")]
    Caption {
        position: usize,
        token: String,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("schema error in image {image_id}: {message}")]
    Schema { image_id: u64, message: String },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("catalog build error: {0}")]
    Build(String),

    #[error("incompatible embedding table: catalog fingerprint {expected:016x}, table fingerprint {found:016x}")]
    Compatibility { expected: u64, found: u64 },

    #[error("unsupported index version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt index file: {0}")]
    Corrupt(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Divergence { epoch: usize, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: Option<usize>, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
