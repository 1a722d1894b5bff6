//! Error type shared across the toolkit.

use thiserror::Error;

/// Unified error for all library operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of two operands (or a tensor and its declared shape) disagree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument violates an operation precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is out of its admissible range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Malformed container bytes (bad magic, bad header, bad offsets).
    #[error("format error: {0}")]
    Format(String),

    /// Container payload ends before the declared entries do.
    #[error("truncated container: {0}")]
    Truncated(String),

    /// Tensor data contains NaN or infinite values.
    #[error("data error: {0}")]
    Data(String),

    /// A bundle is missing a required entry or its metadata is inconsistent.
    #[error("schema error: {0}")]
    Schema(String),

    /// A delta targets a tensor the base weights do not have.
    #[error("missing tensor: {0}")]
    MissingTensor(String),

    /// A concept token collides with the existing vocabulary.
    #[error("token collision: {0}")]
    Collision(String),

    /// Support patches average to the zero vector.
    #[error("degenerate prototype: {0}")]
    DegeneratePrototype(String),

    /// A synthetic-set spec cannot be realized.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
