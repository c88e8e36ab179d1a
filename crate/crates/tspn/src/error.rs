//! Crate-wide error type.

use thiserror::Error;

/// Everything that can go wrong across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("instance has no groups")]
    EmptyInstance,

    #[error("tour has no waypoints")]
    EmptyTour,

    #[error("group {group} is not visited (closest approach {dist:.6e} > {tol:.1e})")]
    GroupMissed { group: usize, dist: f64, tol: f64 },

    #[error("claimed cover is not a vertex cover: {0}")]
    NotVertexCover(String),

    #[error("embedding failed: {0}")]
    EmbeddingFailed(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("budget of {budget} {what} exceeded")]
    BudgetExceeded { budget: usize, what: &'static str },

    #[error("tour is not portal-respecting: {0}")]
    NotLight(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
