//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MemoryError>;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("no key-encryption key registered under id {0:?}")]
    UnknownKek(String),

    #[error("record not found: {namespace}/{user_id}/{record_id}")]
    NotFound {
        namespace: String,
        user_id: String,
        record_id: String,
    },

    #[error("authenticated decryption failed (tampered data or wrong key)")]
    AuthFailure,

    #[error("envelope parse error: {0}")]
    EnvelopeParse(String),

    #[error("decompression failed: {0}")]
    Decompression(String),

    #[error("keyring error: {0}")]
    Keyring(String),

    #[error("message rejected: {0}")]
    InvalidMessage(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("storage failure: {0}")]
    Storage(String),

    #[error("backend failure: {0}{}", retry_hint(.retry_after_ms))]
    Backend {
        reason: String,
        retry_after_ms: Option<u64>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MemoryError {
    pub fn backend(reason: impl Into<String>) -> Self {
        MemoryError::Backend {
            reason: reason.into(),
            retry_after_ms: None,
        }
    }
}

fn retry_hint(retry_after_ms: &Option<u64>) -> String {
    match retry_after_ms {
        Some(ms) => format!(" (retry after {ms} ms)"),
        None => String::new(),
    }
}
