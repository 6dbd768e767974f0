use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(&'static str),

    #[error("training diverged: non-finite parameter after {0}")]
    Diverged(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("rejected unlearning request: {0}")]
    Request(String),

    #[error("cache version mismatch: found {found}, expected {expected}")]
    CacheVersion { found: u32, expected: u32 },

    #[error("cache digest mismatch for {what}")]
    CacheDigest { what: String },

    #[error("cache blob file truncated: {0}")]
    CacheTruncated(String),

    #[error("malformed cache: {0}")]
    CacheFormat(String),

    #[error("brute-force size limit exceeded: n = {n}, limit = {limit}")]
    SizeLimit { n: usize, limit: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for every variant raised while reading or validating an on-disk cache.
    pub fn is_cache_error(&self) -> bool {
        matches!(
            self,
            Error::CacheVersion { .. }
                | Error::CacheDigest { .. }
                | Error::CacheTruncated(_)
                | Error::CacheFormat(_)
        )
    }
}
