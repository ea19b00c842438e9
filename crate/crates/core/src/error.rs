// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by kernels, loading, decomposition and route extraction.
#[derive(Debug, Error)]
#[non_exhaustive]
pub enum Error {
    /// Tensor extents do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A numeric routine failed (non-convergence, non-positive statistic, ...).
    #[error("numeric error: {message} (residual {residual:e})")]
    Numeric {
        /// What went wrong.
        message: String,
        /// Residual or offending value, when one is available.
        residual: f64,
    },

    /// Token id outside the vocabulary.
    #[error("vocabulary error: id {id} out of range for vocabulary of {vocab_size}")]
    Vocabulary {
        /// Offending id.
        id: u32,
        /// Size of the vocabulary.
        vocab_size: usize,
    },

    /// Text could not be encoded.
    #[error("encoding error: {0}")]
    Encoding(String),

    /// Checkpoint or config could not be loaded.
    #[error("load error ({tensor}): {message}")]
    Load {
        /// Tensor or file the error refers to.
        tensor: String,
        /// Details.
        message: String,
    },

    /// Sequence longer than the model context.
    #[error("context error: sequence of {len} tokens exceeds context limit {limit}")]
    Context {
        /// Sequence length.
        len: usize,
        /// Configured limit.
        limit: usize,
    },

    /// A layer, head or position index is out of range.
    #[error("out of range: {0}")]
    OutOfRange(String),

    /// Invalid graph node.
    #[error("invalid node: {0}")]
    InvalidNode(String),

    /// An input that must be non-empty was empty.
    #[error("empty input: {0}")]
    Empty(String),

    /// Malformed input data (CSV, JSON, corpus file, ...).
    #[error("parse error: {0}")]
    Parse(String),

    /// Filesystem error.
    #[error("io error on {path}: {source}")]
    Io {
        /// Path being accessed.
        path: PathBuf,
        /// Underlying error.
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialization error.
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(tensor: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Load {
            tensor: tensor.into(),
            message: message.into(),
        }
    }
}

/// Crate result alias.
pub type Result<T> = std::result::Result<T, Error>;
