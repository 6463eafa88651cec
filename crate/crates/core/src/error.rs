//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("generalized Lyapunov operator is singular (smallest singular value {sigma_min:.3e})")]
    SingularOperator { sigma_min: f64 },

    #[error("closed-loop pencil unstable at iteration {iteration} (max Re(lambda) = {max_real:.3e}); re-initialize from a different P0")]
    StepUnstable { iteration: usize, max_real: f64 },

    #[error("no convergence after {iterations} iterations (residual {residual:.3e}); gamma may be below the critical attenuation level")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("path {path} diverged to a non-finite state at step {step}")]
    PathDiverged { path: usize, step: usize },

    #[error("grid alignment: {0}")]
    GridAlignment(String),

    #[error("data matrix rank deficient: rank {rank} < required {required} (singular value gap {sigma_ratio:.3e}); extend the data horizon or increase exploration amplitude")]
    RankDeficient {
        rank: usize,
        required: usize,
        sigma_ratio: f64,
    },

    #[error("perturbed block {block} is singular (smallest singular value {sigma_min:.3e}); evaluation error too large")]
    BlockSingular { block: &'static str, sigma_min: f64 },

    #[error("non-finite iterate at learning iteration {iteration}")]
    NonFiniteIterate { iteration: usize },

    #[error("behavior policy is not internally stabilizing: {0}")]
    NotStabilizing(String),

    #[error("moment ODE integration failed: {0}")]
    MomentOde(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
