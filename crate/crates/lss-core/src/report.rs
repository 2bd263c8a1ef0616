//! Solve reports, convergence-rate fitting and operation-count models.

use serde::Serialize;

use crate::error::{Error, Result};

/// Result of fitting log10 ‖r‖ = γ·log10 N + log10 C over cycles 1..N.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RateFit {
    /// Slope γ; the convergence rate is reported as -γ.
    pub gamma: f64,
    /// Intercept C.
    pub c: f64,
    /// Number of leading residuals used for the fit.
    pub cycles_used: usize,
    /// True when nonpositive residuals truncated the fit to a prefix.
    pub truncated: bool,
}

/// Least-squares fit of the residual history against cycle count.
///
/// `residuals[k]` is the residual after cycle k+1 (cycle 0 is dropped by the
/// caller). Nonpositive entries truncate the fit to the positive prefix,
/// flagged in the result.
pub fn fit_convergence_rate(residuals: &[f64]) -> Result<RateFit> {
    let prefix = residuals
        .iter()
        .position(|r| !(*r > 0.0))
        .unwrap_or(residuals.len());
    if prefix < 3 {
        return Err(Error::FitTooShort { got: prefix });
    }

    let xs: Vec<f64> = (1..=prefix).map(|n| (n as f64).log10()).collect();
    let ys: Vec<f64> = residuals[..prefix].iter().map(|r| r.log10()).collect();
    let n = prefix as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let denom = n * sxx - sx * sx;
    let gamma = (n * sxy - sx * sy) / denom;
    let intercept = (sy - gamma * sx) / n;

    Ok(RateFit {
        gamma,
        c: 10f64.powf(intercept),
        cycles_used: prefix,
        truncated: prefix < residuals.len(),
    })
}

/// Per-run record of an iterative (or direct) solve.
#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    /// Solver that produced the run (e.g. "solution-mg", "minres").
    pub scheme: String,
    /// ‖r‖₂ per cycle (multigrid) or per iteration (Krylov); entry 0 is the
    /// initial residual ‖b‖.
    pub residual_history: Vec<f64>,
    /// Sensitivity estimate per cycle/iteration; entry 0 corresponds to the
    /// zero initial guess. Empty for raw-system solves with no trajectory.
    pub gradient_history: Vec<f64>,
    /// Fitted slope γ of log10 ‖r‖ vs log10 cycles; present once ≥ 3 cycles
    /// were recorded.
    pub gamma: Option<f64>,
    /// Fit intercept C.
    pub fit_c: Option<f64>,
    /// Closed cycle range [first, last] the fit used (cycle 0 excluded).
    pub fit_range: Option<(usize, usize)>,
    /// Estimated floating-point operations per the cost models.
    pub estimated_flops: f64,
    pub wall_time_s: f64,
    /// Final sensitivity estimate, when a trajectory was in scope.
    pub final_gradient: Option<f64>,
    /// True when the run met its relative tolerance.
    pub converged: bool,
    /// Cycles (or iterations) actually run.
    pub cycles: usize,
    /// Caller-provided configuration echo.
    pub config_echo: Option<String>,
}

impl SolveReport {
    pub fn new(scheme: impl Into<String>) -> Self {
        Self {
            scheme: scheme.into(),
            residual_history: Vec::new(),
            gradient_history: Vec::new(),
            gamma: None,
            fit_c: None,
            fit_range: None,
            estimated_flops: 0.0,
            wall_time_s: 0.0,
            final_gradient: None,
            converged: false,
            cycles: 0,
            config_echo: None,
        }
    }

    /// Fits γ over all cycles after the first and stores the result.
    pub fn fit_rate(&mut self) {
        if self.residual_history.len() > 3 {
            if let Ok(fit) = fit_convergence_rate(&self.residual_history[1..]) {
                self.gamma = Some(fit.gamma);
                self.fit_c = Some(fit.c);
                self.fit_range = Some((1, fit.cycles_used));
            }
        }
    }

    /// Relative residuals against the initial ‖b‖.
    pub fn relative_residuals(&self) -> Vec<f64> {
        let b = self.residual_history.first().copied().unwrap_or(1.0);
        self.residual_history.iter().map(|r| r / b).collect()
    }

    /// First cycle index at which the relative residual fell to `rel_tol`.
    pub fn cycles_to(&self, rel_tol: f64) -> Option<usize> {
        let b = *self.residual_history.first()?;
        self.residual_history
            .iter()
            .position(|r| r / b <= rel_tol)
    }
}

/// Operation-count models, in units of fine-grid block operations (mn).
pub mod cost {
    /// One V-cycle of matrix-restriction multigrid: every level smooths at
    /// fine-grid cost through the Galerkin triple product.
    pub fn matrix_mg_cycle(m: usize, n: usize, levels: usize, nu1: usize, nu2: usize) -> f64 {
        (levels * m * n * (nu1 + nu2)) as f64
    }

    /// One V-cycle of solution-restriction (or classic) multigrid: level
    /// sizes halve, so the geometric series sums to 2.
    pub fn solution_mg_cycle(m: usize, n: usize, nu1: usize, nu2: usize) -> f64 {
        2.0 * (m * n * (nu1 + nu2)) as f64
    }

    /// Krylov iteration count model: one operator apply per iteration.
    pub fn krylov(m: usize, n: usize, iterations: usize) -> f64 {
        (iterations * m * n) as f64
    }

    /// Direct block elimination (block-Thomas or one-pass cyclic reduction).
    pub fn block_elimination(m: usize, n: usize) -> f64 {
        14.0 * (m * n * n * n) as f64
    }
}
