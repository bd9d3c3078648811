use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DatagenError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("cannot ingest {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error("caption provider: {0}")]
    Provider(String),
    #[error("export: {0}")]
    Export(String),
}

impl DatagenError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn ingest(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Ingest {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
