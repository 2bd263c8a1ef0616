//! Tangent recovery, sensitivity evaluation and the direct-solve oracle.

use nalgebra::Vector3;

use crate::dynamics::{State, Trajectory};
use crate::error::{Error, Result};
use crate::kkt::{BlockTridiag, KktBlocks, KktVector, BLOCK};

/// Desk-scale guard for the block-Thomas direct solver.
pub const DIRECT_SOLVE_MAX_ROWS: usize = 4096;

/// Tangent solution recovered from the Schur unknown.
#[derive(Clone, Debug)]
pub struct TangentSolution {
    /// Tangent states v_0..v_m (∂u/∂ξ along the trajectory).
    pub v: Vec<Vector3<f64>>,
    /// Step-centered time-dilation factors η_1..η_m.
    pub eta: Vec<f64>,
}

/// Scalar quantity of interest J(u) with its state gradient.
pub trait QuantityOfInterest {
    fn evaluate(&self, u: &State) -> f64;
    fn gradient_u(&self, u: &State) -> Vector3<f64>;
}

/// Default quantity of interest J(u) = z.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanZ;

impl QuantityOfInterest for MeanZ {
    fn evaluate(&self, u: &State) -> f64 {
        u.z
    }
    fn gradient_u(&self, _u: &State) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, 1.0)
    }
}

/// Recovers (v, η) from w: v = -Bᵀw and η_i = -(1/α²) f_iᵀ w_i.
///
/// Out-of-range multiplier blocks are zero, which encodes the boundary
/// conditions w(0) = w(T) = 0.
pub fn recover_tangent(blocks: &KktBlocks, w: &KktVector) -> TangentSolution {
    let m = blocks.steps();
    debug_assert_eq!(w.blocks(), m);

    let mut v = vec![Vector3::zeros(); m + 1];
    for r in 0..m {
        let wr = w.block(r);
        v[r] -= blocks.f_blocks[r].transpose() * wr;
        v[r + 1] -= blocks.g_blocks[r].transpose() * wr;
    }
    let eta = (0..m)
        .map(|r| -blocks.flow_mid[r].dot(&w.block(r)) / blocks.alpha2)
        .collect();
    TangentSolution { v, eta }
}

/// Trapezoidal-rule finite-T average of a node-centered sequence.
fn trapezoid_mean(values: &[f64]) -> f64 {
    let m = values.len() - 1;
    let interior: f64 = values[1..m].iter().sum();
    (0.5 * values[0] + interior + 0.5 * values[m]) / m as f64
}

/// Sensitivity dJ̄/dξ = mean⟨∂J/∂u, v⟩ + mean(ηJ) − mean(η)·mean(J).
///
/// Node-centered quantities are averaged by the trapezoidal rule; the
/// step-centered η is paired with step-midpoint averages of J.
pub fn gradient<Q: QuantityOfInterest + ?Sized>(
    traj: &Trajectory,
    tangent: &TangentSolution,
    qoi: &Q,
) -> f64 {
    let m = traj.steps();
    debug_assert_eq!(tangent.v.len(), m + 1);
    debug_assert_eq!(tangent.eta.len(), m);

    let j: Vec<f64> = traj.states.iter().map(|u| qoi.evaluate(u)).collect();
    let gv: Vec<f64> = traj
        .states
        .iter()
        .zip(&tangent.v)
        .map(|(u, v)| qoi.gradient_u(u).dot(v))
        .collect();

    let mean_gv = trapezoid_mean(&gv);
    let mean_j = trapezoid_mean(&j);
    let mean_eta = tangent.eta.iter().sum::<f64>() / m as f64;
    let mean_eta_j = tangent
        .eta
        .iter()
        .enumerate()
        .map(|(r, eta)| eta * 0.5 * (j[r] + j[r + 1]))
        .sum::<f64>()
        / m as f64;

    mean_gv + mean_eta_j - mean_eta * mean_j
}

/// Trapezoidal finite-T average of J over a trajectory.
pub fn time_average<Q: QuantityOfInterest + ?Sized>(traj: &Trajectory, qoi: &Q) -> f64 {
    let j: Vec<f64> = traj.states.iter().map(|u| qoi.evaluate(u)).collect();
    trapezoid_mean(&j)
}

/// Block-Thomas (block LU) direct solve of an SPD block-tridiagonal system.
///
/// Verification oracle and small-scale reference; guarded to
/// [`DIRECT_SOLVE_MAX_ROWS`] block rows.
pub fn direct_solve(a: &BlockTridiag, rhs: &KktVector) -> Result<KktVector> {
    let m = a.rows();
    if m > DIRECT_SOLVE_MAX_ROWS {
        return Err(Error::Guard(format!(
            "direct solve limited to {DIRECT_SOLVE_MAX_ROWS} block rows, got {m}"
        )));
    }
    if rhs.len() != BLOCK * m {
        return Err(Error::DimensionMismatch {
            expected: BLOCK * m,
            got: rhs.len(),
        });
    }

    // Forward elimination: pivot d_i = D_i - L_i d_{i-1}^{-1} U_{i-1}.
    let mut pivots = Vec::with_capacity(m);
    let mut y = Vec::with_capacity(m);
    let mut pivot_lu = Vec::with_capacity(m);

    pivots.push(a.diag[0]);
    y.push(rhs.block(0));
    for i in 1..m {
        let prev_lu = nalgebra::Matrix3::from(pivots[i - 1]).lu();
        // Non-SPD pivots surface as singular or negative-definite factors.
        if prev_lu.determinant() <= 0.0 {
            return Err(Error::SingularBlock { index: i - 1 });
        }
        let li = prev_lu
            .solve(&a.lower[i - 1].transpose())
            .ok_or(Error::SingularBlock { index: i - 1 })?
            .transpose(); // L_i d_{i-1}^{-1}
        pivots.push(a.diag[i] - li * a.upper[i - 1]);
        let yi = rhs.block(i) - li * y[i - 1];
        y.push(yi);
        pivot_lu.push(prev_lu);
    }
    let last_lu = nalgebra::Matrix3::from(pivots[m - 1]).lu();
    if last_lu.determinant() <= 0.0 {
        return Err(Error::SingularBlock { index: m - 1 });
    }
    pivot_lu.push(last_lu);

    // Back substitution.
    let mut w = KktVector::zeros(m);
    let wm = pivot_lu[m - 1]
        .solve(&y[m - 1])
        .ok_or(Error::SingularBlock { index: m - 1 })?;
    w.set_block(m - 1, &wm);
    for i in (0..m - 1).rev() {
        let r = y[i] - a.upper[i] * w.block(i + 1);
        let wi = pivot_lu[i]
            .solve(&r)
            .ok_or(Error::SingularBlock { index: i })?;
        w.set_block(i, &wi);
    }
    Ok(w)
}
