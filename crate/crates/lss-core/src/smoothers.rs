//! Relaxation and Krylov methods for the Schur system.
//!
//! All solvers work against [`LinearOperator`], so they run identically on
//! explicit block-tridiagonal matrices, the matrix-free Schur operator and
//! the Galerkin coarse-grid operators. They are used standalone and as
//! multigrid smoothers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kkt::{BlockTridiag, KktVector, BLOCK};
use crate::operator::{axpy, dot, norm2, LinearOperator};

/// Smoother/inner-solver selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmootherKind {
    BlockGaussSeidel,
    ConjugateGradient,
    Minres,
}

/// Smoother configuration.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SmootherSpec {
    pub kind: SmootherKind,
    /// Iteration count when used standalone.
    pub iterations: usize,
    /// Under-relaxation factor in (0, 1]; Gauss-Seidel only.
    pub omega: f64,
}

impl SmootherSpec {
    pub fn new(kind: SmootherKind, iterations: usize) -> Self {
        Self {
            kind,
            iterations,
            omega: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(Error::Config(format!(
                "omega must lie in (0, 1], got {}",
                self.omega
            )));
        }
        Ok(())
    }
}

/// Residual history of an iterative solve.
///
/// `residual_norms` has `iterations_run + 1` entries, the first being the
/// initial residual.
#[derive(Clone, Debug, Default, Serialize)]
pub struct IterationTrace {
    pub residual_norms: Vec<f64>,
    pub iterations_run: usize,
}

impl IterationTrace {
    fn new(initial: f64) -> Self {
        Self {
            residual_norms: vec![initial],
            iterations_run: 0,
        }
    }

    fn push(&mut self, r: f64) {
        self.residual_norms.push(r);
        self.iterations_run += 1;
    }

    pub fn initial(&self) -> f64 {
        self.residual_norms[0]
    }

    pub fn last(&self) -> f64 {
        *self.residual_norms.last().unwrap()
    }

    /// True if the final residual met `rel_tol` times the initial rhs norm.
    pub fn converged_to(&self, rel_tol: f64, rhs_norm: f64) -> bool {
        self.last() <= rel_tol * rhs_norm
    }
}

/// Under-relaxation schedule for Gauss-Seidel on coarsened grids:
/// ω = ω_f · (dt_f / dt), clamped to [0.05, ω_f].
///
/// The schedule itself is an artifact choice; only its monotone-decreasing
/// shape is prescribed by the coarse-grid stability requirement.
pub fn under_relaxation(dt: f64, dt_f: f64, omega_f: f64) -> f64 {
    (omega_f * dt_f / dt).max(0.05).min(omega_f)
}

/// Forward block Gauss-Seidel sweeps with under-relaxation.
///
/// Each block update solves the 3x3 diagonal block exactly and blends the
/// result with factor `omega`. Records the residual once per sweep.
pub fn block_gauss_seidel(
    a: &BlockTridiag,
    w: &mut KktVector,
    rhs: &KktVector,
    sweeps: usize,
    omega: f64,
) -> Result<IterationTrace> {
    let m = a.rows();
    if w.len() != BLOCK * m || rhs.len() != BLOCK * m {
        return Err(Error::DimensionMismatch {
            expected: BLOCK * m,
            got: w.len().min(rhs.len()),
        });
    }
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::Config(format!("omega must lie in (0, 1], got {omega}")));
    }

    let factors: Vec<_> = a
        .diag
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let lu = d.lu();
            if lu.determinant().abs() < 1e-300 {
                Err(Error::SingularBlock { index: i })
            } else {
                Ok(lu)
            }
        })
        .collect::<Result<_>>()?;

    let res = |w: &KktVector| crate::kkt::residual_norm(a, w, rhs).expect("dims checked");
    let mut trace = IterationTrace::new(res(w));

    for _ in 0..sweeps {
        for i in 0..m {
            let mut r = rhs.block(i);
            if i > 0 {
                r -= a.lower[i - 1] * w.block(i - 1);
            }
            if i + 1 < m {
                r -= a.upper[i] * w.block(i + 1);
            }
            let xi = factors[i]
                .solve(&r)
                .ok_or(Error::SingularBlock { index: i })?;
            let blended = (1.0 - omega) * w.block(i) + omega * xi;
            w.set_block(i, &blended);
        }
        trace.push(res(w));
    }
    Ok(trace)
}

/// Unpreconditioned conjugate gradients on an SPD operator.
///
/// Stops at `max_iters` or when `‖r‖₂ ≤ rel_tol · ‖rhs‖₂`. Fails with
/// [`Error::CgBreakdown`] if a search direction has non-positive curvature.
pub fn conjugate_gradient<Op: LinearOperator + ?Sized>(
    op: &Op,
    w: &mut KktVector,
    rhs: &KktVector,
    max_iters: usize,
    rel_tol: f64,
) -> Result<IterationTrace> {
    conjugate_gradient_observed(op, w, rhs, max_iters, rel_tol, |_, _| {})
}

/// CG with a per-iteration observer `(iteration, current iterate)`.
pub fn conjugate_gradient_observed<Op, Obs>(
    op: &Op,
    w: &mut KktVector,
    rhs: &KktVector,
    max_iters: usize,
    rel_tol: f64,
    mut observe: Obs,
) -> Result<IterationTrace>
where
    Op: LinearOperator + ?Sized,
    Obs: FnMut(usize, &[f64]),
{
    let n = op.dim();
    if w.len() != n || rhs.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: w.len().min(rhs.len()),
        });
    }

    let mut r = vec![0.0; n];
    op.apply(w, &mut r);
    for (ri, bi) in r.iter_mut().zip(rhs.iter()) {
        *ri = bi - *ri;
    }
    let mut rho = dot(&r, &r);
    let mut trace = IterationTrace::new(rho.sqrt());
    let tol = rel_tol * rhs.norm();
    if rho.sqrt() <= tol {
        return Ok(trace);
    }

    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    for k in 1..=max_iters {
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            // Exhausted directions at round-off level are convergence, not
            // indefiniteness.
            if rho.sqrt() <= f64::EPSILON * rhs.norm().max(1.0) {
                break;
            }
            return Err(Error::CgBreakdown { curvature: pap });
        }
        let alpha = rho / pap;
        axpy(alpha, &p, w);
        axpy(-alpha, &ap, &mut r);
        let rho_next = dot(&r, &r);
        trace.push(rho_next.sqrt());
        observe(k, w);
        if rho_next.sqrt() <= tol {
            break;
        }
        let beta = rho_next / rho;
        for (pi, ri) in p.iter_mut().zip(r.iter()) {
            *pi = ri + beta * *pi;
        }
        rho = rho_next;
    }
    Ok(trace)
}

/// MINRES on a symmetric (possibly indefinite) operator.
///
/// Same stopping contract as CG; the recorded residual norms are the
/// Givens-recurrence estimates, which are monotone non-increasing by
/// construction. Non-convergence is reported in the trace, not as an error.
pub fn minres<Op: LinearOperator + ?Sized>(
    op: &Op,
    w: &mut KktVector,
    rhs: &KktVector,
    max_iters: usize,
    rel_tol: f64,
) -> Result<IterationTrace> {
    minres_observed(op, w, rhs, max_iters, rel_tol, |_, _| {})
}

/// MINRES with a per-iteration observer `(iteration, current iterate)`.
pub fn minres_observed<Op, Obs>(
    op: &Op,
    w: &mut KktVector,
    rhs: &KktVector,
    max_iters: usize,
    rel_tol: f64,
    mut observe: Obs,
) -> Result<IterationTrace>
where
    Op: LinearOperator + ?Sized,
    Obs: FnMut(usize, &[f64]),
{
    let n = op.dim();
    if w.len() != n || rhs.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: w.len().min(rhs.len()),
        });
    }

    let mut r = vec![0.0; n];
    op.apply(w, &mut r);
    for (ri, bi) in r.iter_mut().zip(rhs.iter()) {
        *ri = bi - *ri;
    }
    let beta1 = norm2(&r);
    let mut trace = IterationTrace::new(beta1);
    let tol = rel_tol * rhs.norm();
    if beta1 == 0.0 || beta1 <= tol {
        return Ok(trace);
    }

    // Lanczos vectors v_{k-1}, v_k and the work vector y.
    let mut v_prev = vec![0.0; n];
    let mut v: Vec<f64> = r.iter().map(|ri| ri / beta1).collect();
    let mut y = vec![0.0; n];
    let mut beta = beta1;

    // Givens state.
    let (mut dbar, mut epsln, mut phibar) = (0.0, 0.0, beta1);
    let (mut cs, mut sn) = (-1.0, 0.0);

    // Direction history w_{k-2}, w_{k-1}.
    let mut w1 = vec![0.0; n];
    let mut w2 = vec![0.0; n];

    for k in 1..=max_iters {
        op.apply(&v, &mut y);
        if k > 1 {
            axpy(-beta, &v_prev, &mut y);
        }
        let alfa = dot(&v, &y);
        axpy(-alfa, &v, &mut y);
        let beta_next = norm2(&y);

        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta_next;
        dbar = -cs * beta_next;

        let gamma = gbar.hypot(beta_next).max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta_next / gamma;
        let phi = cs * phibar;
        phibar *= sn;

        // w_k = (v_k - oldeps·w_{k-2} - delta·w_{k-1}) / gamma
        for i in 0..n {
            let wk = (v[i] - oldeps * w1[i] - delta * w2[i]) / gamma;
            w1[i] = w2[i];
            w2[i] = wk;
            w[i] += phi * wk;
        }

        trace.push(phibar.abs());
        observe(k, w);
        if phibar.abs() <= tol || beta_next <= f64::EPSILON * beta1 {
            break;
        }

        std::mem::swap(&mut v_prev, &mut v);
        for (vi, yi) in v.iter_mut().zip(y.iter()) {
            *vi = yi / beta_next;
        }
        beta = beta_next;
    }
    Ok(trace)
}
