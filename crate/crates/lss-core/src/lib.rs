//! Least-squares shadowing (LSS) sensitivity analysis for chaotic ODEs,
//! demonstrated on the Lorenz system.
//!
//! LSS replaces the ill-posed tangent initial-value problem of a chaotic
//! system with a linearly constrained least-squares problem over a whole
//! trajectory. Eliminating the tangent variables from the KKT optimality
//! system leaves a symmetric positive definite block-tridiagonal system
//! `A w = b` with `A = B Bᵀ + (1/α²) C Cᵀ`, which this crate assembles
//! ([`kkt`]) and solves with several interchangeable methods:
//!
//! * block-Thomas direct elimination ([`sensitivity::direct_solve`]),
//! * unpreconditioned CG and MINRES ([`smoothers`]),
//! * three multigrid-in-time schemes ([`multigrid`]): classic
//!   injection-based coarsening, Galerkin (variational) matrix restriction,
//!   and solution restriction, all with 1st-5th order averaging transfers,
//! * block cyclic reduction, exact in one pass ([`cyclic_reduction`]).
//!
//! From the Schur unknown `w` the tangent solution `(v, η)` and the
//! sensitivity `dJ̄/dξ` of a long-time averaged quantity of interest are
//! recovered ([`sensitivity`]).

pub mod cyclic_reduction;
pub mod dense;
pub mod dynamics;
pub mod error;
pub mod kkt;
pub mod multigrid;
pub mod operator;
pub mod report;
pub mod sensitivity;
pub mod smoothers;

pub use dynamics::{LorenzParams, Param, State, Trajectory};
pub use error::{Error, Result};
pub use kkt::{BlockTridiag, KktBlocks, KktVector, SchurOperator};
pub use multigrid::{AveragingStencil, CoarseSolver, GridHierarchy, MgConfig, MgScheme};
pub use operator::LinearOperator;
pub use report::SolveReport;
pub use sensitivity::{MeanZ, QuantityOfInterest, TangentSolution};
pub use smoothers::{IterationTrace, SmootherKind, SmootherSpec};
