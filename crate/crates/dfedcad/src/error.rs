//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or shape mismatch between tensors, models, or batches.
    #[error("shape error: {0}")]
    Shape(String),

    /// A computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid configuration; the message lists every offending field.
    #[error("configuration error: {0}")]
    Config(String),

    /// A wire stream failed to decode.
    #[error("decode error: {0}")]
    Decode(#[from] DecodeError),

    /// An in-memory compressed structure is internally inconsistent.
    #[error("corruption error: {0}")]
    Corrupt(String),

    /// Messages exchanged between clients violate the shared architecture.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// An operation was called outside its contract (e.g. a stale cache).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Failure modes of `wcp::decode_wire`, each distinguished so callers and
/// tests can tell truncation from corruption.
#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("bad magic {found:02x?}, expected \"DCAD\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported wire version {0}")]
    BadVersion(u8),

    #[error("stream truncated while reading {field}")]
    Truncated { field: &'static str },

    #[error("layer {layer}: index {index} out of range for k={k}")]
    IndexOverflow { layer: usize, index: u32, k: u16 },

    #[error("invalid centroid table: {0}")]
    BadTable(String),

    #[error("invalid layer shape: {0}")]
    BadShape(String),

    #[error("{0} trailing bytes after the last bias block")]
    TrailingBytes(usize),
}
