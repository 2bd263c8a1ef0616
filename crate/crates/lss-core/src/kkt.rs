//! Discrete LSS KKT blocks and the Schur complement A = BBᵀ + (1/α²)CCᵀ.
//!
//! The trapezoidal discretization of the tangent constraint couples
//! consecutive nodes through
//!
//! ```text
//! F_i = I/Δt + ½ ∂f/∂u(u_i),   G_i = -I/Δt + ½ ∂f/∂u(u_i)
//! ```
//!
//! with constraint row i (i = 1..m) reading
//! `F_{i-1} v_{i-1} + G_i v_i + f_i η_i = -b_i`, where `f_i` and `b_i` are
//! the midpoint averages of the flow and of ∂f/∂ξ over nodes i-1 and i.
//! Eliminating v and η leaves the SPD block-tridiagonal system `A w = b`
//! in the step-centered multiplier w (boundary values w(0) = w(T) = 0 are
//! excluded structurally).

use nalgebra::{Matrix3, Vector3};

use crate::dynamics::{jacobian_u, jacobian_xi, rhs, LorenzParams, Param, Trajectory};
use crate::error::{Error, Result};
use crate::operator::{norm2, LinearOperator};

pub(crate) const BLOCK: usize = 3;

/// Flat block vector w_1..w_m (length 3m).
#[derive(Clone, Debug, PartialEq)]
pub struct KktVector {
    data: Vec<f64>,
}

impl KktVector {
    pub fn zeros(blocks: usize) -> Self {
        Self {
            data: vec![0.0; BLOCK * blocks],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if data.len() % BLOCK != 0 {
            return Err(Error::DimensionMismatch {
                expected: BLOCK * (data.len() / BLOCK + 1),
                got: data.len(),
            });
        }
        Ok(Self { data })
    }

    /// Number of length-3 blocks.
    pub fn blocks(&self) -> usize {
        self.data.len() / BLOCK
    }

    pub fn block(&self, i: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&self.data[BLOCK * i..BLOCK * (i + 1)])
    }

    pub fn set_block(&mut self, i: usize, v: &Vector3<f64>) {
        self.data[BLOCK * i..BLOCK * (i + 1)].copy_from_slice(v.as_slice());
    }

    pub fn add_to_block(&mut self, i: usize, v: &Vector3<f64>) {
        for (dst, src) in self.data[BLOCK * i..BLOCK * (i + 1)].iter_mut().zip(v.iter()) {
            *dst += src;
        }
    }

    pub fn norm(&self) -> f64 {
        norm2(&self.data)
    }
}

impl std::ops::Deref for KktVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl std::ops::DerefMut for KktVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Per-step KKT blocks assembled from a trajectory.
///
/// Index convention (0-based storage for 1-based paper rows): entry `i`
/// of every field belongs to constraint row i+1, so `f_blocks[i]` is
/// F_i (at node i), `g_blocks[i]` is G_{i+1} (at node i+1), and
/// `flow_mid[i]`/`forcing[i]` average nodes i and i+1.
#[derive(Clone, Debug)]
pub struct KktBlocks {
    pub f_blocks: Vec<Matrix3<f64>>,
    pub g_blocks: Vec<Matrix3<f64>>,
    /// Midpoint-averaged flow f_i (the time-dilation column of C).
    pub flow_mid: Vec<Vector3<f64>>,
    /// Midpoint-averaged parameter column ∂f/∂ξ (right-hand side b_i).
    pub forcing: Vec<Vector3<f64>>,
    pub alpha2: f64,
    pub dt: f64,
}

impl KktBlocks {
    /// Number of constraint rows m.
    pub fn steps(&self) -> usize {
        self.g_blocks.len()
    }
}

/// Explicit block-tridiagonal matrix with 3x3 blocks.
///
/// `lower[k]` couples block row k+1 to k, `upper[k]` couples row k to k+1.
/// For Schur systems `lower[k] == upper[k].transpose()`.
#[derive(Clone, Debug)]
pub struct BlockTridiag {
    pub lower: Vec<Matrix3<f64>>,
    pub diag: Vec<Matrix3<f64>>,
    pub upper: Vec<Matrix3<f64>>,
}

impl BlockTridiag {
    pub fn new(
        lower: Vec<Matrix3<f64>>,
        diag: Vec<Matrix3<f64>>,
        upper: Vec<Matrix3<f64>>,
    ) -> Result<Self> {
        let m = diag.len();
        if m == 0 || lower.len() != m - 1 || upper.len() != m - 1 {
            return Err(Error::DimensionMismatch {
                expected: m.saturating_sub(1),
                got: lower.len().max(upper.len()),
            });
        }
        Ok(Self { lower, diag, upper })
    }

    /// Block-diagonal matrix (no coupling).
    pub fn block_diagonal(diag: Vec<Matrix3<f64>>) -> Self {
        let m = diag.len();
        Self {
            lower: vec![Matrix3::zeros(); m - 1],
            diag,
            upper: vec![Matrix3::zeros(); m - 1],
        }
    }

    pub fn identity(rows: usize) -> Self {
        Self::block_diagonal(vec![Matrix3::identity(); rows])
    }

    /// Number of block rows.
    pub fn rows(&self) -> usize {
        self.diag.len()
    }

    /// Largest off-symmetry |U_k - L_kᵀ| entry, for diagnostics and tests.
    pub fn max_asymmetry(&self) -> f64 {
        self.upper
            .iter()
            .zip(&self.lower)
            .map(|(u, l)| (u - l.transpose()).abs().max())
            .fold(0.0, f64::max)
    }
}

impl LinearOperator for BlockTridiag {
    fn dim(&self) -> usize {
        BLOCK * self.rows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let m = self.rows();
        debug_assert_eq!(x.len(), BLOCK * m);
        for r in 0..m {
            let xr = Vector3::from_column_slice(&x[BLOCK * r..BLOCK * (r + 1)]);
            let mut acc = self.diag[r] * xr;
            if r > 0 {
                let xm = Vector3::from_column_slice(&x[BLOCK * (r - 1)..BLOCK * r]);
                acc += self.lower[r - 1] * xm;
            }
            if r + 1 < m {
                let xp = Vector3::from_column_slice(&x[BLOCK * (r + 1)..BLOCK * (r + 2)]);
                acc += self.upper[r] * xp;
            }
            y[BLOCK * r..BLOCK * (r + 1)].copy_from_slice(acc.as_slice());
        }
    }
}

/// Assembles the per-step blocks for sensitivity with respect to `which`.
pub fn assemble_blocks(
    traj: &Trajectory,
    p: &LorenzParams,
    which: Param,
    alpha2: f64,
) -> Result<KktBlocks> {
    if traj.states.len() < 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: traj.states.len(),
        });
    }
    if !(alpha2 > 0.0) {
        return Err(Error::Config(format!(
            "alpha2 must be positive, got {alpha2}"
        )));
    }

    let m = traj.steps();
    let dt = traj.dt;
    let inv_dt = Matrix3::identity() / dt;

    let jac: Vec<Matrix3<f64>> = traj.states.iter().map(|u| jacobian_u(u, p)).collect();
    let flow: Vec<Vector3<f64>> = traj.states.iter().map(|u| rhs(u, p)).collect();
    let dxi: Vec<Vector3<f64>> = traj
        .states
        .iter()
        .map(|u| jacobian_xi(u, which))
        .collect();

    let f_blocks = (0..m).map(|i| inv_dt + 0.5 * jac[i]).collect();
    let g_blocks = (0..m).map(|i| -inv_dt + 0.5 * jac[i + 1]).collect();
    let flow_mid = (0..m).map(|i| 0.5 * (flow[i] + flow[i + 1])).collect();
    let forcing = (0..m).map(|i| 0.5 * (dxi[i] + dxi[i + 1])).collect();

    Ok(KktBlocks {
        f_blocks,
        g_blocks,
        flow_mid,
        forcing,
        alpha2,
        dt,
    })
}

/// Explicit Schur complement blocks.
///
/// Row i: D_i = F_{i-1}F_{i-1}ᵀ + G_iG_iᵀ + (1/α²)f_if_iᵀ, with
/// super-diagonal G_iF_iᵀ and sub-diagonal F_iG_iᵀ.
pub fn schur_blocks(blocks: &KktBlocks) -> BlockTridiag {
    let m = blocks.steps();
    let inv_a2 = 1.0 / blocks.alpha2;

    let diag = (0..m)
        .map(|r| {
            let fr = &blocks.f_blocks[r];
            let gr = &blocks.g_blocks[r];
            let fm = &blocks.flow_mid[r];
            fr * fr.transpose() + gr * gr.transpose() + inv_a2 * fm * fm.transpose()
        })
        .collect();
    let upper: Vec<_> = (0..m - 1)
        .map(|r| blocks.g_blocks[r] * blocks.f_blocks[r + 1].transpose())
        .collect();
    let lower = upper.iter().map(|u| u.transpose()).collect();

    BlockTridiag { lower, diag, upper }
}

/// Matrix-free Schur-complement operator: w ↦ B(Bᵀw) + (1/α²)C(Cᵀw).
pub struct SchurOperator<'a> {
    blocks: &'a KktBlocks,
}

impl<'a> SchurOperator<'a> {
    pub fn new(blocks: &'a KktBlocks) -> Self {
        Self { blocks }
    }
}

impl LinearOperator for SchurOperator<'_> {
    fn dim(&self) -> usize {
        BLOCK * self.blocks.steps()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let b = self.blocks;
        let m = b.steps();
        debug_assert_eq!(x.len(), BLOCK * m);

        let xb = |r: usize| Vector3::from_column_slice(&x[BLOCK * r..BLOCK * (r + 1)]);

        // t = Bᵀ w over the m+1 tangent nodes.
        let mut t = vec![Vector3::zeros(); m + 1];
        for r in 0..m {
            let wr = xb(r);
            t[r] += b.f_blocks[r].transpose() * wr;
            t[r + 1] += b.g_blocks[r].transpose() * wr;
        }

        // y = B t + (1/α²) C (Cᵀ w)
        let inv_a2 = 1.0 / b.alpha2;
        for r in 0..m {
            let mut acc = b.f_blocks[r] * t[r] + b.g_blocks[r] * t[r + 1];
            let eta = b.flow_mid[r].dot(&xb(r));
            acc += inv_a2 * eta * b.flow_mid[r];
            y[BLOCK * r..BLOCK * (r + 1)].copy_from_slice(acc.as_slice());
        }
    }
}

/// Applies the Schur complement without forming it.
pub fn apply_schur(blocks: &KktBlocks, w: &KktVector) -> Result<KktVector> {
    let m = blocks.steps();
    if w.blocks() != m {
        return Err(Error::DimensionMismatch {
            expected: BLOCK * m,
            got: w.len(),
        });
    }
    let mut out = KktVector::zeros(m);
    SchurOperator::new(blocks).apply(w, &mut out);
    Ok(out)
}

/// Stacked right-hand side b_1..b_m of the Schur system A w = b.
///
/// The KKT right-hand side carries -b; block elimination cancels the sign,
/// so the Schur system is solved with +b directly.
pub fn rhs_vector(blocks: &KktBlocks) -> KktVector {
    let m = blocks.steps();
    let mut out = KktVector::zeros(m);
    for r in 0..m {
        out.set_block(r, &blocks.forcing[r]);
    }
    out
}

/// ‖rhs − A·w‖₂ for any operator realization of A.
pub fn residual_norm<Op: LinearOperator + ?Sized>(
    op: &Op,
    w: &KktVector,
    rhs: &KktVector,
) -> Result<f64> {
    if w.len() != op.dim() || rhs.len() != op.dim() {
        return Err(Error::DimensionMismatch {
            expected: op.dim(),
            got: w.len().max(rhs.len()),
        });
    }
    let mut aw = vec![0.0; op.dim()];
    op.apply(w, &mut aw);
    for (a, b) in aw.iter_mut().zip(rhs.iter()) {
        *a = b - *a;
    }
    Ok(norm2(&aw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense;
    use crate::dynamics::{seeded_trajectory, LorenzParams};
    use crate::operator::dot;
    use nalgebra::DVector;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lorenz_system(seed: u64, m: usize, dt: f64, alpha2: f64) -> (Trajectory, KktBlocks) {
        let p = LorenzParams::default();
        let traj = seeded_trajectory(seed, dt, m, 100.0, &p).unwrap();
        let blocks = assemble_blocks(&traj, &p, Param::R, alpha2).unwrap();
        (traj, blocks)
    }

    fn random_kkt_vector(seed: u64, m: usize) -> KktVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        KktVector::from_vec((0..3 * m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn fixed_point_trajectory_has_zero_flow_blocks() {
        let p = LorenzParams::default();
        let u = p.fixed_point();
        let traj = Trajectory::new(vec![u, u], 0.01, 0.0).unwrap();
        let blocks = assemble_blocks(&traj, &p, Param::R, 40.0).unwrap();
        assert_eq!(blocks.steps(), 1);
        assert!(blocks.flow_mid[0].norm() < 1e-12);
    }

    #[test]
    fn block_identities_f_plus_g_and_f_minus_g() {
        let p = LorenzParams::default();
        let (traj, blocks) = lorenz_system(0, 16, 0.01, 40.0);
        for i in 0..blocks.steps() - 1 {
            // F_i + G_i = ∂f/∂u(u_i): F_i is f_blocks[i], G_i is g_blocks[i-1],
            // both evaluated at node i; check at interior nodes.
            let sum = blocks.f_blocks[i + 1] + blocks.g_blocks[i];
            let j = jacobian_u(&traj.states[i + 1], &p);
            assert!((sum - j).abs().max() < 1e-12);
            let diff = blocks.f_blocks[i + 1] - blocks.g_blocks[i];
            let two_over_dt = 2.0 / traj.dt;
            assert!((diff - Matrix3::identity() * two_over_dt).abs().max() < 1e-9);
        }
    }

    #[test]
    fn schur_blocks_are_symmetric() {
        let (_, blocks) = lorenz_system(1, 32, 0.01, 40.0);
        let a = schur_blocks(&blocks);
        assert!(a.max_asymmetry() < 1e-12);
        for d in &a.diag {
            assert!((d - d.transpose()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn schur_blocks_match_dense_bbt_oracle() {
        // Independent route: assemble B and C densely, form BBᵀ + CCᵀ/α².
        let (_, blocks) = lorenz_system(2, 2, 0.01, 40.0);
        let a = dense::to_dense(&schur_blocks(&blocks));
        let oracle = dense::dense_schur_oracle(&blocks);
        let diff = (&a - &oracle).abs().max();
        assert!(diff < 1e-10 * oracle.abs().max(), "entrywise diff {diff}");
    }

    #[test]
    fn schur_is_positive_definite_on_random_segment() {
        let (_, blocks) = lorenz_system(3, 8, 0.01, 40.0);
        let a = dense::to_dense(&schur_blocks(&blocks));
        let eig = a.symmetric_eigen();
        let min = eig.eigenvalues.min();
        assert!(min > 0.0, "smallest eigenvalue {min}");
    }

    #[test]
    fn apply_schur_zero_maps_to_zero() {
        let (_, blocks) = lorenz_system(4, 8, 0.01, 40.0);
        let out = apply_schur(&blocks, &KktVector::zeros(8)).unwrap();
        assert_eq!(out.norm(), 0.0);
    }

    #[test]
    fn apply_schur_matches_explicit_blocks() {
        let (_, blocks) = lorenz_system(5, 16, 0.01, 40.0);
        let a = schur_blocks(&blocks);
        let w = random_kkt_vector(99, 16);
        let free = apply_schur(&blocks, &w).unwrap();
        let mut explicit = KktVector::zeros(16);
        a.apply(&w, &mut explicit);
        let num = free
            .iter()
            .zip(explicit.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(num / explicit.norm() < 1e-13);
    }

    #[test]
    fn apply_schur_is_self_adjoint() {
        let (_, blocks) = lorenz_system(6, 16, 0.01, 40.0);
        let w = random_kkt_vector(1, 16);
        let y = random_kkt_vector(2, 16);
        let aw = apply_schur(&blocks, &w).unwrap();
        let ay = apply_schur(&blocks, &y).unwrap();
        let lhs = dot(&aw, &y);
        let rhs = dot(&w, &ay);
        assert!(
            (lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()),
            "{lhs} vs {rhs}"
        );
    }

    #[test]
    fn apply_schur_rejects_length_mismatch() {
        let (_, blocks) = lorenz_system(7, 8, 0.01, 40.0);
        assert!(matches!(
            apply_schur(&blocks, &KktVector::zeros(7)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rhs_vector_at_fixed_point_for_r() {
        let p = LorenzParams::default();
        let u = p.fixed_point();
        let traj = Trajectory::new(vec![u; 4], 0.01, 0.0).unwrap();
        let blocks = assemble_blocks(&traj, &p, Param::R, 40.0).unwrap();
        let b = rhs_vector(&blocks);
        let xstar = (p.b * (p.r - 1.0)).sqrt();
        for i in 0..3 {
            let blk = b.block(i);
            assert!((blk - Vector3::new(0.0, xstar, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn rhs_vector_vanishes_for_s_on_diagonal_line() {
        // ∂f/∂s = (y-x, 0, 0) vanishes when x = y.
        let p = LorenzParams::default();
        let states = (0..5)
            .map(|i| Vector3::new(i as f64, i as f64, 1.0 + i as f64))
            .collect();
        let traj = Trajectory::new(states, 0.01, 0.0).unwrap();
        let blocks = assemble_blocks(&traj, &p, Param::S, 40.0).unwrap();
        assert_eq!(rhs_vector(&blocks).norm(), 0.0);
    }

    #[test]
    fn rhs_vector_length_contract() {
        let (_, blocks) = lorenz_system(8, 12, 0.01, 40.0);
        assert_eq!(rhs_vector(&blocks).len(), 36);
    }

    #[test]
    fn residual_norm_contracts() {
        let (_, blocks) = lorenz_system(9, 32, 0.01, 40.0);
        let a = schur_blocks(&blocks);
        let b = rhs_vector(&blocks);
        assert_eq!(residual_norm(&a, &KktVector::zeros(32), &b).unwrap(), b.norm());

        let w = crate::sensitivity::direct_solve(&a, &b).unwrap();
        let r = residual_norm(&a, &w, &b).unwrap();
        assert!(r <= 1e-10 * b.norm(), "residual {r:.3e}");
    }

    #[test]
    fn dense_symmetry_of_assembled_schur() {
        let (_, blocks) = lorenz_system(10, 16, 0.01, 40.0);
        let a = dense::to_dense(&schur_blocks(&blocks));
        let asym = (&a - &a.transpose()).abs().max();
        assert!(asym <= 1e-12 * a.abs().max());
    }

    #[test]
    fn spd_quadratic_form_on_random_vectors() {
        let (_, blocks) = lorenz_system(11, 32, 0.01, 40.0);
        for seed in 0..100 {
            let w = random_kkt_vector(seed, 32);
            let aw = apply_schur(&blocks, &w).unwrap();
            let quad = dot(&w, &aw);
            assert!(quad > 0.0, "wᵀAw = {quad} at seed {seed}");
        }
    }

    #[test]
    fn condition_number_decreases_under_time_coarsening() {
        // Re-assembled systems at dt = 0.001 * 2^k; κ should fall as dt grows.
        let p = LorenzParams::default();
        let traj = seeded_trajectory(13, 0.001, 128, 100.0, &p).unwrap();
        let mut kappas = Vec::new();
        let stencil = crate::multigrid::averaging_weights(2).unwrap();
        let mut t = traj;
        for _ in 0..4 {
            let blocks = assemble_blocks(&t, &p, Param::R, 40.0).unwrap();
            let (lo, hi) = dense::eig_extremes(&schur_blocks(&blocks)).unwrap();
            kappas.push(hi / lo);
            t = crate::multigrid::restrict_solution(&t, &stencil).unwrap();
        }
        for pair in kappas.windows(2) {
            assert!(pair[1] < pair[0], "κ sequence not decreasing: {kappas:?}");
        }
    }

    #[test]
    fn cg_error_decreases_in_a_norm() {
        // Spec: residual decreases "in A-norm-consistent fashion"; the CG
        // guarantee is monotone A-norm error, checked against a direct solve.
        let (_, blocks) = lorenz_system(14, 64, 0.01, 40.0);
        let a = schur_blocks(&blocks);
        let b = rhs_vector(&blocks);
        let exact = crate::sensitivity::direct_solve(&a, &b).unwrap();

        let mut w = KktVector::zeros(64);
        let mut history = Vec::new();
        crate::smoothers::conjugate_gradient_observed(&a, &mut w, &b, 60, 0.0, |_, wk| {
            let e = DVector::from_iterator(192, wk.iter().zip(exact.iter()).map(|(a, b)| a - b));
            let mut ae = vec![0.0; 192];
            a.apply(e.as_slice(), &mut ae);
            history.push(dot(e.as_slice(), &ae).sqrt());
        })
        .unwrap();
        for pair in history.windows(2) {
            assert!(
                pair[1] <= pair[0] * (1.0 + 1e-10),
                "A-norm error grew: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }
}
