//! Block cyclic reduction of the Schur system.
//!
//! Eliminating the odd block rows of a block-tridiagonal system yields a
//! half-size block-tridiagonal system in the even rows:
//!
//! ```text
//! L_I = -L_i D_{i-1}⁻¹ L_{i-1}
//! D_I =  D_i - L_i D_{i-1}⁻¹ U_{i-1} - U_i D_{i+1}⁻¹ L_{i+1}
//! U_I = -U_i D_{i+1}⁻¹ U_{i+1}
//! b_I =  b_i - L_i D_{i-1}⁻¹ b_{i-1} - U_i D_{i+1}⁻¹ b_{i+1}
//! ```
//!
//! With an exact coarsest solve the recursion is exact in one pass. The
//! inversion-free mode realizes every D⁻¹ action by a nested inner Krylov
//! solve instead of factorizing, which is what the operation-count model
//! estimates.

use std::time::Instant;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::kkt::{residual_norm, BlockTridiag, KktVector, BLOCK};
use crate::report::{cost, SolveReport};

/// One level of the reduction: the system to reduce (or solve).
#[derive(Clone, Debug)]
pub struct CrLevel {
    pub tridiag: BlockTridiag,
    pub rhs: KktVector,
}

impl CrLevel {
    pub fn new(tridiag: BlockTridiag, rhs: KktVector) -> Result<Self> {
        if rhs.len() != tridiag.dim_blocks() * BLOCK {
            return Err(Error::DimensionMismatch {
                expected: tridiag.dim_blocks() * BLOCK,
                got: rhs.len(),
            });
        }
        Ok(Self { tridiag, rhs })
    }

    pub fn rows(&self) -> usize {
        self.tridiag.rows()
    }
}

trait DimBlocks {
    fn dim_blocks(&self) -> usize;
}

impl DimBlocks for BlockTridiag {
    fn dim_blocks(&self) -> usize {
        self.rows()
    }
}

fn factorize_diag(a: &BlockTridiag) -> Result<Vec<nalgebra::LU<f64, nalgebra::U3, nalgebra::U3>>> {
    a.diag
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
        .collect()
}

/// Eliminates the odd block rows (1-indexed) of an odd-sized level.
pub fn reduce_level(level: &CrLevel) -> Result<CrLevel> {
    let a = &level.tridiag;
    let m = a.rows();
    if m < 3 || m % 2 == 0 {
        return Err(Error::Config(format!(
            "cyclic reduction needs an odd block-row count >= 3, got {m}"
        )));
    }
    let lu = factorize_diag(a)?;
    let mc = (m - 1) / 2;

    let mut lower = Vec::with_capacity(mc - 1);
    let mut diag = Vec::with_capacity(mc);
    let mut upper = Vec::with_capacity(mc - 1);
    let mut rhs = KktVector::zeros(mc);

    for j in 0..mc {
        let r = 2 * j + 1; // kept row (0-indexed); neighbours r-1, r+1 exist
        let l_r = &a.lower[r - 1]; // couples r -> r-1
        let u_r = &a.upper[r]; // couples r -> r+1

        // L_r D_{r-1}⁻¹ and U_r D_{r+1}⁻¹ as explicit 3x3 products.
        let l_dinv = lu[r - 1]
            .solve(&l_r.transpose())
            .ok_or(Error::SingularBlock { index: r - 1 })?
            .transpose();
        let u_dinv = lu[r + 1]
            .solve(&u_r.transpose())
            .ok_or(Error::SingularBlock { index: r + 1 })?
            .transpose();

        let mut d = a.diag[r] - l_dinv * a.upper[r - 1];
        if r + 1 < m {
            d -= u_dinv * a.lower[r];
        }
        diag.push(d);

        if j > 0 {
            // L_{r-1} couples row r-1 to r-2.
            lower.push(-l_dinv * a.lower[r - 2]);
        }
        if j + 1 < mc {
            // U_{r+1} couples row r+1 to r+2.
            upper.push(-u_dinv * a.upper[r + 1]);
        }

        let mut b = level.rhs.block(r) - l_dinv * level.rhs.block(r - 1);
        b -= u_dinv * level.rhs.block(r + 1);
        rhs.set_block(j, &b);
    }

    CrLevel::new(BlockTridiag { lower, diag, upper }, rhs)
}

/// Recovers the eliminated rows: D_i w_i = b_i - L_i w_{i-1} - U_i w_{i+1}.
pub fn back_substitute(coarse_solution: &KktVector, level: &CrLevel) -> Result<KktVector> {
    let a = &level.tridiag;
    let m = a.rows();
    let mc = (m - 1) / 2;
    if coarse_solution.blocks() != mc {
        return Err(Error::DimensionMismatch {
            expected: BLOCK * mc,
            got: coarse_solution.len(),
        });
    }
    let lu = factorize_diag(a)?;

    let mut w = KktVector::zeros(m);
    for j in 0..mc {
        let b = coarse_solution.block(j);
        w.set_block(2 * j + 1, &b);
    }
    for r in (0..m).step_by(2) {
        let mut b = level.rhs.block(r);
        if r > 0 {
            b -= a.lower[r - 1] * w.block(r - 1);
        }
        if r + 1 < m {
            b -= a.upper[r] * w.block(r + 1);
        }
        let wi = lu[r].solve(&b).ok_or(Error::SingularBlock { index: r })?;
        w.set_block(r, &wi);
    }
    Ok(w)
}

/// Next size of the form 2^k - 1 that holds `m` rows.
fn padded_rows(m: usize) -> usize {
    let mut size = 1;
    while size < m {
        size = 2 * size + 1;
    }
    size
}

/// Full cyclic reduction: pad to 2^k - 1 rows with decoupled identity rows,
/// reduce to a single block row, solve it exactly, back-substitute.
pub fn solve_cr(a: &BlockTridiag, rhs: &KktVector) -> Result<(KktVector, SolveReport)> {
    let start = Instant::now();
    let m = a.rows();
    if rhs.len() != BLOCK * m {
        return Err(Error::DimensionMismatch {
            expected: BLOCK * m,
            got: rhs.len(),
        });
    }

    let target = padded_rows(m);
    let mut padded = a.clone();
    let mut padded_rhs_vec = rhs.to_vec();
    for _ in m..target {
        padded.diag.push(Matrix3::identity());
        padded.lower.push(Matrix3::zeros());
        padded.upper.push(Matrix3::zeros());
        padded_rhs_vec.extend_from_slice(&[0.0; BLOCK]);
    }
    let padded_rhs = KktVector::from_vec(padded_rhs_vec)?;

    let mut stack = vec![CrLevel::new(padded, padded_rhs)?];
    while stack.last().unwrap().rows() > 1 {
        let next = reduce_level(stack.last().unwrap())?;
        stack.push(next);
    }

    let bottom = stack.last().unwrap();
    let lu = bottom.tridiag.diag[0].lu();
    let w0 = lu
        .solve(&bottom.rhs.block(0))
        .ok_or(Error::SingularBlock { index: 0 })?;
    let mut w = KktVector::zeros(1);
    w.set_block(0, &w0);

    for level in stack.iter().rev().skip(1) {
        w = back_substitute(&w, level)?;
    }

    let w = KktVector::from_vec(w[..BLOCK * m].to_vec())?;
    let b_norm = rhs.norm();
    let final_res = residual_norm(a, &w, rhs)?;

    let mut report = SolveReport::new("cyclic-reduction");
    report.residual_history = vec![b_norm, final_res];
    report.cycles = 1;
    report.converged = final_res <= 1e-9 * b_norm.max(f64::MIN_POSITIVE);
    report.estimated_flops = cost::block_elimination(target, BLOCK);
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((w, report))
}

// ---------------------------------------------------------------------------
// Inversion-free coarse-operator application
// ---------------------------------------------------------------------------

/// Coarse-level operator realized without inverting or factorizing any
/// diagonal block: every D⁻¹y becomes an inner CG solve (MINRES fallback on
/// detected indefiniteness), nested through the reduction levels.
pub struct CrApply<'a> {
    base: &'a BlockTridiag,
    levels: usize,
    inner_tol: f64,
    inner_max: usize,
}

impl<'a> CrApply<'a> {
    pub fn new(base: &'a BlockTridiag, levels: usize, inner_tol: f64) -> Self {
        Self {
            base,
            levels,
            inner_tol,
            inner_max: 48,
        }
    }

    /// Block rows of the coarse level this operator represents.
    pub fn rows(&self) -> usize {
        let mut m = self.base.rows();
        for _ in 0..self.levels {
            m = (m - 1) / 2;
        }
        m
    }

    fn apply_diag(&self, level: usize, j: usize, x: &Vector3<f64>) -> Result<Vector3<f64>> {
        if level == 0 {
            return Ok(self.base.diag[j] * x);
        }
        let r = 2 * j + 1;
        let mut out = self.apply_diag(level - 1, r, x)?;
        let u_x = self.apply_upper(level - 1, r - 1, x)?;
        let z = self.solve_diag(level - 1, r - 1, &u_x)?;
        out -= self.apply_lower(level - 1, r, &z)?;
        let l_x = self.apply_lower(level - 1, r + 1, x)?;
        let z = self.solve_diag(level - 1, r + 1, &l_x)?;
        out -= self.apply_upper(level - 1, r, &z)?;
        Ok(out)
    }

    /// Sub-diagonal block of `level` at row j (couples j to j-1), applied.
    fn apply_lower(&self, level: usize, j: usize, x: &Vector3<f64>) -> Result<Vector3<f64>> {
        if level == 0 {
            return Ok(self.base.lower[j - 1] * x);
        }
        let r = 2 * j + 1;
        let l_x = self.apply_lower(level - 1, r - 1, x)?;
        let z = self.solve_diag(level - 1, r - 1, &l_x)?;
        Ok(-self.apply_lower(level - 1, r, &z)?)
    }

    /// Super-diagonal block of `level` at row j (couples j to j+1), applied.
    fn apply_upper(&self, level: usize, j: usize, x: &Vector3<f64>) -> Result<Vector3<f64>> {
        if level == 0 {
            return Ok(self.base.upper[j] * x);
        }
        let r = 2 * j + 1;
        let u_x = self.apply_upper(level - 1, r + 1, x)?;
        let z = self.solve_diag(level - 1, r + 1, &u_x)?;
        Ok(-self.apply_upper(level - 1, r, &z)?)
    }

    /// Inner iterative solve D z = y on one diagonal block.
    fn solve_diag(&self, level: usize, j: usize, y: &Vector3<f64>) -> Result<Vector3<f64>> {
        match self.cg3(level, j, y) {
            Err(Error::CgBreakdown { .. }) => self.minres3(level, j, y),
            other => other,
        }
    }

    fn cg3(&self, level: usize, j: usize, b: &Vector3<f64>) -> Result<Vector3<f64>> {
        let tol = self.inner_tol * b.norm();
        let mut x = Vector3::zeros();
        let mut r = *b;
        if r.norm() <= tol {
            return Ok(x);
        }
        let mut p = r;
        let mut rho = r.norm_squared();
        for _ in 0..self.inner_max {
            let ap = self.apply_diag(level, j, &p)?;
            let pap = p.dot(&ap);
            if pap <= 0.0 {
                return Err(Error::CgBreakdown { curvature: pap });
            }
            let alpha = rho / pap;
            x += alpha * p;
            r -= alpha * ap;
            let rho_next = r.norm_squared();
            if rho_next.sqrt() <= tol {
                return Ok(x);
            }
            p = r + (rho_next / rho) * p;
            rho = rho_next;
        }
        Err(Error::InnerSolve { level, block: j })
    }

    /// 3-dimensional MINRES on the same block operator, used when CG detects
    /// indefiniteness.
    fn minres3(&self, level: usize, j: usize, b: &Vector3<f64>) -> Result<Vector3<f64>> {
        let tol = self.inner_tol * b.norm();
        let beta1 = b.norm();
        if beta1 == 0.0 {
            return Ok(Vector3::zeros());
        }
        let mut x = Vector3::zeros();
        let mut v_prev = Vector3::zeros();
        let mut v = b / beta1;
        let mut beta = beta1;
        let (mut dbar, mut epsln, mut phibar) = (0.0, 0.0, beta1);
        let (mut cs, mut sn) = (-1.0f64, 0.0f64);
        let mut w1 = Vector3::zeros();
        let mut w2 = Vector3::zeros();
        for k in 1..=self.inner_max {
            let mut y = self.apply_diag(level, j, &v)?;
            if k > 1 {
                y -= beta * v_prev;
            }
            let alfa = v.dot(&y);
            y -= alfa * v;
            let beta_next = y.norm();

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

            let wk = (v - oldeps * w1 - delta * w2) / gamma;
            w1 = w2;
            w2 = wk;
            x += phi * wk;

            if phibar.abs() <= tol || beta_next <= f64::EPSILON * beta1 {
                return Ok(x);
            }
            v_prev = v;
            v = y / beta_next;
            beta = beta_next;
        }
        Err(Error::InnerSolve { level, block: j })
    }
}

/// Applies the level-`levels` coarse operator to a coarse-sized vector
/// through the inversion-free decomposition.
pub fn inversion_free_apply(cr: &CrApply<'_>, x: &KktVector) -> Result<KktVector> {
    let m = cr.rows();
    if x.blocks() != m {
        return Err(Error::DimensionMismatch {
            expected: BLOCK * m,
            got: x.len(),
        });
    }
    let mut out = KktVector::zeros(m);
    for j in 0..m {
        let mut acc = cr.apply_diag(cr.levels, j, &x.block(j))?;
        if j > 0 {
            acc += cr.apply_lower(cr.levels, j, &x.block(j - 1))?;
        }
        if j + 1 < m {
            acc += cr.apply_upper(cr.levels, j, &x.block(j + 1))?;
        }
        out.set_block(j, &acc);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Operation-count model
// ---------------------------------------------------------------------------

/// Parameters of the cyclic-reduction operation-count estimate.
#[derive(Clone, Copy, Debug)]
pub struct FlopModel {
    /// Flops per Jacobian-block multiply.
    pub p: u64,
    /// Iterations per inverse-block solve.
    pub q: u64,
    /// Reduction level count (m = 2^l + 1).
    pub l: u32,
    /// State dimension.
    pub n: u64,
}

impl FlopModel {
    /// Builds the model for `m` time steps, deriving l from m = 2^l + 1.
    pub fn new(p: u64, q: u64, n: u64, m: usize) -> Result<Self> {
        let l = level_count(m)?;
        Ok(Self { p, q, l, n })
    }
}

fn level_count(m: usize) -> Result<u32> {
    if m < 3 || !(m - 1).is_power_of_two() {
        return Err(Error::BadFlopSize { m });
    }
    Ok((m - 1).trailing_zeros())
}

/// Leading-term operation counts per coarse-grid multiply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopEstimate {
    /// Inversion-free cyclic reduction: 2^(l+2) · p · q^(l+1).
    pub cyclic_reduction: u128,
    /// One block Jacobi iteration on the same system: (8m-4)p + (5m-2)n.
    pub jacobi: u128,
}

/// Evaluates the operation-count model at m time steps (m = 2^l + 1).
pub fn flop_estimate(model: &FlopModel, m: usize) -> Result<FlopEstimate> {
    let l = level_count(m)?;
    if l != model.l {
        return Err(Error::BadFlopSize { m });
    }
    let p = model.p as u128;
    let q = model.q as u128;
    let n = model.n as u128;
    let m = m as u128;
    Ok(FlopEstimate {
        cyclic_reduction: (1u128 << (l + 2)) * p * q.pow(l + 1),
        jacobi: (8 * m - 4) * p + (5 * m - 2) * n,
    })
}
