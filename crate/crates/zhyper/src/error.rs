//! Crate-wide error type.
//!
//! One enum covers the failure classes the library reports: shape
//! disagreements, violated call contracts, lookup misses, bad user input,
//! malformed files, and invalid run configurations.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension disagreement between two operands. Names both shapes.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A call-site contract was violated (non-scalar loss, negative std, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Lookup by key failed (layer index, projection type, context id, ...).
    #[error("unknown key: {0}")]
    Key(String),

    /// Caller-supplied data is invalid (token id out of range, oversize input).
    #[error("invalid input: {0}")]
    Input(String),

    /// A file could not be parsed or failed validation on load.
    #[error("load error in {path}: {detail}")]
    Load { path: String, detail: String },

    /// A run configuration is inconsistent (empty dataset, missing context set).
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn key(msg: impl Into<String>) -> Self {
        Error::Key(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn load(path: impl AsRef<std::path::Path>, detail: impl Into<String>) -> Self {
        Error::Load {
            path: path.as_ref().display().to_string(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
