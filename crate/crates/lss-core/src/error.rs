//! Error type shared across the crate.

use crate::report::SolveReport;

/// Errors raised by trajectory generation, assembly and the solvers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Integration produced a non-finite state.
    #[error("non-finite state encountered at integration step {step}")]
    NonFiniteState { step: usize },

    /// A vector or block sequence had the wrong length.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A diagonal block could not be factorized.
    #[error("singular or non-positive-definite diagonal block at block row {index}")]
    SingularBlock { index: usize },

    /// CG observed non-positive curvature, so the operator is not SPD.
    #[error("conjugate gradient breakdown: p^T A p = {curvature:.3e} <= 0")]
    CgBreakdown { curvature: f64 },

    /// The step count does not support the requested coarsening depth.
    #[error("step count {steps} is not divisible by 2^{levels}")]
    NotCoarsenable { steps: usize, levels: u32 },

    /// Averaging order outside 1..=5.
    #[error("averaging order {order} outside the supported range 1..=5")]
    BadOrder { order: usize },

    /// A parameter id string did not name one of s, r, b.
    #[error("unknown parameter id {0:?} (expected one of \"s\", \"r\", \"b\")")]
    UnknownParameter(String),

    /// Residual grew by more than the divergence guard.
    #[error("solver diverged: residual grew {growth:.3e}x from its initial value")]
    Diverged {
        growth: f64,
        report: Box<SolveReport>,
    },

    /// A desk-scale guard was exceeded.
    #[error("guard violation: {0}")]
    Guard(String),

    /// Invalid solver or experiment configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An inner iterative solve inside inversion-free cyclic reduction failed.
    #[error("inner solve did not converge at reduction level {level}, block row {block}")]
    InnerSolve { level: usize, block: usize },

    /// Cyclic-reduction flop model only covers m = 2^l + 1.
    #[error("flop model requires m = 2^l + 1 time steps, got {m}")]
    BadFlopSize { m: usize },

    /// Convergence-rate fit needs at least three positive residuals.
    #[error("convergence fit needs at least 3 positive residuals, got {got}")]
    FitTooShort { got: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
