//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Malformed or out-of-contract input (bad records, unknown tokens,
    /// unreadable files, version mismatches).
    #[error("input error: {0}")]
    Input(String),

    /// A day arrived out of order while sliding the mining window.
    #[error("ordering error: {0}")]
    Ordering(String),

    /// Invalid or unsupported configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// An internal invariant was violated; indicates a bug.
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
