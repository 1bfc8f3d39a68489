//! Error taxonomy shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LafrError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("corrupt data: {0}")]
    CorruptData(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("insufficient domains: need at least {needed}, got {got}")]
    InsufficientDomains { needed: usize, got: usize },
    #[error("invalid labeling: {0}")]
    InvalidLabeling(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("client {client_id} failed: {source}")]
    ClientFailure {
        client_id: String,
        source: Box<LafrError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LafrError>;
