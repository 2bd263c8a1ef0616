//! Desk-scale dense assemblies: verification oracles and spectrum probes.
//!
//! Everything here materializes O((mn)²) storage and is guarded accordingly;
//! the iterative solvers never touch this module.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kkt::{BlockTridiag, KktBlocks, BLOCK};
use crate::operator::LinearOperator;

/// Rows guard for dense eigen-decompositions (mn ≤ 3072 unknowns).
pub const DENSE_EIG_MAX_ROWS: usize = 1024;

/// Dense assembly of a block-tridiagonal matrix.
pub fn to_dense(a: &BlockTridiag) -> DMatrix<f64> {
    let m = a.rows();
    let n = BLOCK * m;
    let mut out = DMatrix::zeros(n, n);
    for r in 0..m {
        out.view_mut((BLOCK * r, BLOCK * r), (BLOCK, BLOCK))
            .copy_from(&a.diag[r]);
        if r + 1 < m {
            out.view_mut((BLOCK * r, BLOCK * (r + 1)), (BLOCK, BLOCK))
                .copy_from(&a.upper[r]);
            out.view_mut((BLOCK * (r + 1), BLOCK * r), (BLOCK, BLOCK))
                .copy_from(&a.lower[r]);
        }
    }
    out
}

/// Dense constraint matrices B (mn × (m+1)n) and C (mn × m).
pub fn dense_b_c(blocks: &KktBlocks) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = blocks.steps();
    let mut b = DMatrix::zeros(BLOCK * m, BLOCK * (m + 1));
    let mut c = DMatrix::zeros(BLOCK * m, m);
    for r in 0..m {
        b.view_mut((BLOCK * r, BLOCK * r), (BLOCK, BLOCK))
            .copy_from(&blocks.f_blocks[r]);
        b.view_mut((BLOCK * r, BLOCK * (r + 1)), (BLOCK, BLOCK))
            .copy_from(&blocks.g_blocks[r]);
        c.view_mut((BLOCK * r, r), (BLOCK, 1))
            .copy_from(&blocks.flow_mid[r]);
    }
    (b, c)
}

/// Independent Schur-complement oracle: BBᵀ + (1/α²)CCᵀ from explicit B, C.
pub fn dense_schur_oracle(blocks: &KktBlocks) -> DMatrix<f64> {
    let (b, c) = dense_b_c(blocks);
    &b * b.transpose() + (&c * c.transpose()) / blocks.alpha2
}

/// Extreme eigenvalues (λ_min, λ_max) of a symmetric block-tridiagonal matrix.
///
/// Guarded to [`DENSE_EIG_MAX_ROWS`] block rows.
pub fn eig_extremes(a: &BlockTridiag) -> Result<(f64, f64)> {
    if a.rows() > DENSE_EIG_MAX_ROWS {
        return Err(Error::Guard(format!(
            "dense eigensolve limited to {DENSE_EIG_MAX_ROWS} block rows, got {}",
            a.rows()
        )));
    }
    let dense = to_dense(a);
    let sym = (&dense + dense.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    Ok((min, max))
}

/// Dense LU solve, for oracles and tiny coarse grids.
pub fn dense_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or(Error::SingularBlock { index: 0 })
}

/// Materializes any operator by applying it to unit vectors.
pub fn operator_to_dense<Op: LinearOperator + ?Sized>(op: &Op) -> DMatrix<f64> {
    let n = op.dim();
    let mut out = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        op.apply(&e, &mut col);
        e[j] = 0.0;
        for i in 0..n {
            out[(i, j)] = col[i];
        }
    }
    out
}
