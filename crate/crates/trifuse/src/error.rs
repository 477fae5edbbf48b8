//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("same padding requires an odd kernel width, got {0}")]
    EvenKernelWithSamePadding(usize),
    #[error("sequence must contain at least one time step")]
    EmptySequence,
    #[error("attention source must contain at least one time step")]
    EmptySource,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("value is not attached to the tape's differentiable graph")]
    DetachedTensor,
    #[error("missing gradient for parameter '{0}'")]
    MissingGradient(String),
    #[error("expected a vector, got shape {0:?}")]
    NonVectorInput(Vec<usize>),
    #[error("positional embedding dimension must be even, got {0}")]
    OddDimension(usize),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("model file version mismatch: {0}")]
    VersionMismatch(String),
    #[error("model file corrupt: {0}")]
    ShapeCorruption(String),
    #[error("dataset schema violation: {0}")]
    SchemaViolation(String),
    #[error("record does not match manifest: {0}")]
    DimMismatchAgainstManifest(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
