use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid dataset: {}", .0.join("; "))]
    InvalidDataset(Vec<String>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {detail}")]
    EmbeddingFile { path: PathBuf, line: usize, detail: String },

    #[error("unknown text (not present in precomputed embeddings): {0:?}")]
    UnknownText(String),

    #[error("provider {provider} unavailable after {attempts} attempt(s) (last status: {}): {detail}",
        .last_status.map(|s| s.to_string()).unwrap_or_else(|| "none".into()))]
    ProviderUnavailable {
        provider: String,
        attempts: u32,
        last_status: Option<u16>,
        detail: String,
    },

    #[error("provider {provider} failed for row(s) {failed:?}: {first}")]
    BatchFailed {
        provider: String,
        failed: Vec<usize>,
        first: Box<Error>,
    },

    #[error("stale cache at {}: manifest fingerprint {found} does not match dataset fingerprint {expected}", .path.display())]
    StaleCache {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("corrupt cache file {}: {detail}", .path.display())]
    CorruptCache { path: PathBuf, detail: String },

    #[error("cache write failed for {}: {source}", .path.display())]
    CacheWrite {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("invalid model format: {0}")]
    ModelFormat(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Coarse grouping used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Provider,
    StaleCache,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::ModelFormat(_) => ErrorCategory::Config,
            Error::ProviderUnavailable { .. } | Error::BatchFailed { .. } => ErrorCategory::Provider,
            Error::StaleCache { .. } => ErrorCategory::StaleCache,
            Error::InvalidArgument(_)
            | Error::InvalidDataset(_)
            | Error::Data(_)
            | Error::EmbeddingFile { .. }
            | Error::UnknownText(_)
            | Error::CorruptCache { .. }
            | Error::CacheWrite { .. }
            | Error::State(_)
            | Error::Io { .. } => ErrorCategory::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
