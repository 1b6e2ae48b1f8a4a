//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("grid has no free cell")]
    AllBlocked,
    #[error("point {0:?} outside grid bounds")]
    OutOfBounds([f64; 3]),
    #[error("degenerate 6d rotation input")]
    DegenerateRotation,
    #[error("matrix is not a rotation (orthonormality/det check failed)")]
    NotARotation,
    #[error("frame carries no object")]
    NoObject,
    #[error("empty surface point set")]
    EmptySurface,
    #[error("task start and goal are not connected by free cells")]
    UnreachableTask,
    #[error("benchmark rejection budget exhausted ({0} attempts)")]
    InfeasibleScene(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("timestep {0} outside schedule range")]
    TimestepOutOfRange(usize),
    #[error("timestep {0} not on the distillation grid")]
    OffGrid(usize),
    #[error("non-adjacent grid pair ({0}, {1})")]
    NonAdjacentPair(usize, usize),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("empty dataset source with non-zero mixing weight")]
    EmptyMixSource,
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
