//! V-cycle multigrid-in-time over the Schur system.
//!
//! Three coarsening schemes share one V-cycle driver:
//!
//! * **classic** — the trajectory is coarsened by injection (every second
//!   node) and the KKT system re-assembled at the doubled step; residuals
//!   are restricted by injection and corrections prolongated by linear
//!   interpolation; block Gauss-Seidel smoothing with the under-relaxation
//!   schedule. Converges the gradient long before the residual.
//! * **matrix restriction** — Galerkin coarse operators A^{2h} = R A^h P
//!   with R = c^h Pᵀ built from the averaging stencils, applied matrix-free
//!   by nesting prolongations and restrictions around the fine-grid apply.
//! * **solution restriction** — the trajectory is coarsened with the
//!   averaging stencils and the KKT system re-assembled per level, so
//!   coarse smoothing costs shrink geometrically.
//!
//! The multiplier grid is staggered (w_i lives at step midpoints with
//! w(0) = w(T) = 0), so odd-order stencils sit symmetrically between two
//! fine midpoints while even-order stencils are collocated; out-of-range
//! multiplier values are zero and only trajectory restriction renormalizes
//! clipped stencils.

use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::dynamics::{LorenzParams, Param, Trajectory};
use crate::error::{Error, Result};
use crate::kkt::{
    assemble_blocks, residual_norm, rhs_vector, schur_blocks, BlockTridiag, KktBlocks, KktVector,
    BLOCK,
};
use crate::operator::LinearOperator;
use crate::report::{cost, SolveReport};
use crate::sensitivity::{gradient, recover_tangent, MeanZ};
use crate::smoothers::{
    block_gauss_seidel, conjugate_gradient, minres, under_relaxation, SmootherKind, SmootherSpec,
};

/// Prolongation scale: restriction equals c^h times the transposed
/// prolongation. 1/2 makes prolongation reproduce interior constants.
pub const TRANSFER_SCALE: f64 = 0.5;

/// Coarsest grids at or below this many block rows are solved densely.
pub const COARSE_DIRECT_MAX_ROWS: usize = 8;

/// Relative tolerance of the coarsest-grid Krylov solve.
pub const COARSE_KRYLOV_TOL: f64 = 1e-12;

/// Residual growth factor that aborts a solve as divergent.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// Averaging stencil for grid transfer, order 1..=5.
///
/// Odd orders are half-point (staggered) stencils, even orders are
/// node-centered, following the two families of averages the schemes use.
#[derive(Clone, Debug)]
pub struct AveragingStencil {
    pub order: usize,
    pub weights: Vec<f64>,
    /// Half-point placement (odd orders).
    pub staggered: bool,
}

/// Exact rational averaging weights for the given order.
pub fn averaging_weights(order: usize) -> Result<AveragingStencil> {
    let weights: Vec<f64> = match order {
        1 => vec![0.5, 0.5],
        2 => vec![0.25, 0.5, 0.25],
        3 => vec![1.0 / 8.0, 3.0 / 8.0, 3.0 / 8.0, 1.0 / 8.0],
        4 => vec![1.0 / 16.0, 0.25, 3.0 / 8.0, 0.25, 1.0 / 16.0],
        5 => vec![
            1.0 / 32.0,
            5.0 / 32.0,
            10.0 / 32.0,
            10.0 / 32.0,
            5.0 / 32.0,
            1.0 / 32.0,
        ],
        _ => return Err(Error::BadOrder { order }),
    };
    Ok(AveragingStencil {
        order,
        weights,
        staggered: order % 2 == 1,
    })
}

impl AveragingStencil {
    /// Offsets on the multiplier (midpoint) grid: coarse block j reads fine
    /// block 2j+1+o for each offset o (0-indexed rows).
    pub fn vector_offsets(&self) -> Vec<isize> {
        match self.order {
            1 => vec![-1, 0],
            2 => vec![-1, 0, 1],
            3 => vec![-2, -1, 0, 1],
            4 => vec![-2, -1, 0, 1, 2],
            5 => vec![-3, -2, -1, 0, 1, 2],
            _ => unreachable!(),
        }
    }

    /// Offsets on the node grid: coarse node j reads fine node 2j+o.
    /// Odd orders skip the center (their half-point legs land on the
    /// neighboring nodes).
    pub fn node_offsets(&self) -> Vec<isize> {
        match self.order {
            1 => vec![-1, 1],
            2 => vec![-1, 0, 1],
            3 => vec![-2, -1, 1, 2],
            4 => vec![-2, -1, 0, 1, 2],
            5 => vec![-3, -2, -1, 1, 2, 3],
            _ => unreachable!(),
        }
    }
}

/// Restriction of a multiplier-grid vector: coarse_j = Σ w_k · fine_{2j+1+k}.
///
/// Out-of-range fine blocks are zero (w(0) = w(T) = 0 virtual nodes), so no
/// boundary renormalization is applied.
pub fn restrict_vector(fine: &KktVector, stencil: &AveragingStencil) -> Result<KktVector> {
    let m = fine.blocks();
    if m % 2 != 0 || m == 0 {
        return Err(Error::NotCoarsenable {
            steps: m,
            levels: 1,
        });
    }
    let mc = m / 2;
    let offsets = stencil.vector_offsets();
    let mut out = KktVector::zeros(mc);
    for j in 0..mc {
        let mut acc = nalgebra::Vector3::zeros();
        for (o, w) in offsets.iter().zip(&stencil.weights) {
            let r = 2 * j as isize + 1 + o;
            if (0..m as isize).contains(&r) {
                acc += *w * fine.block(r as usize);
            }
        }
        out.set_block(j, &acc);
    }
    Ok(out)
}

/// Prolongation P = (1/c^h)·Rᵀ of a multiplier-grid vector.
pub fn prolong_vector(coarse: &KktVector, stencil: &AveragingStencil) -> KktVector {
    let mc = coarse.blocks();
    let m = 2 * mc;
    let offsets = stencil.vector_offsets();
    let mut out = KktVector::zeros(m);
    let scale = 1.0 / TRANSFER_SCALE;
    for j in 0..mc {
        let cj = coarse.block(j);
        for (o, w) in offsets.iter().zip(&stencil.weights) {
            let r = 2 * j as isize + 1 + o;
            if (0..m as isize).contains(&r) {
                out.add_to_block(r as usize, &(scale * w * cj));
            }
        }
    }
    out
}

/// Coarsens a trajectory: dt doubles, node count halves, endpoints copied,
/// interior nodes stencil-averaged with clipped weights renormalized.
pub fn restrict_solution(traj: &Trajectory, stencil: &AveragingStencil) -> Result<Trajectory> {
    let m = traj.steps();
    if m % 2 != 0 || m < 2 {
        return Err(Error::NotCoarsenable {
            steps: m,
            levels: 1,
        });
    }
    let mc = m / 2;
    let offsets = stencil.node_offsets();
    let mut states = Vec::with_capacity(mc + 1);
    states.push(traj.states[0]);
    for j in 1..mc {
        let mut acc = nalgebra::Vector3::zeros();
        let mut total = 0.0;
        for (o, w) in offsets.iter().zip(&stencil.weights) {
            let idx = 2 * j as isize + o;
            if (0..=m as isize).contains(&idx) {
                acc += *w * traj.states[idx as usize];
                total += w;
            }
        }
        states.push(acc / total);
    }
    states.push(traj.states[m]);
    Trajectory::new(states, 2.0 * traj.dt, traj.t0)
}

/// Injection coarsening of an explicit system: coarse row j is fine row 2j
/// verbatim (blocks L_{2j}, D_{2j}, U_{2j}), right-hand side sampled.
pub fn classic_coarsen(a: &BlockTridiag, rhs: &KktVector) -> Result<(BlockTridiag, KktVector)> {
    let m = a.rows();
    if m % 2 != 0 || m == 0 {
        return Err(Error::NotCoarsenable {
            steps: m,
            levels: 1,
        });
    }
    let mc = m / 2;
    let mut diag = Vec::with_capacity(mc);
    let mut upper = Vec::with_capacity(mc - 1);
    let mut lower = Vec::with_capacity(mc - 1);
    let mut out_rhs = KktVector::zeros(mc);
    for j in 0..mc {
        let fr = 2 * j + 1; // 0-indexed fine row for 1-indexed row 2j
        diag.push(a.diag[fr]);
        out_rhs.set_block(j, &rhs.block(fr));
        if j + 1 < mc {
            upper.push(a.upper[fr]);
        }
        if j > 0 {
            lower.push(a.lower[fr - 1]);
        }
    }
    Ok((BlockTridiag { lower, diag, upper }, out_rhs))
}

/// Galerkin coarse operator R·A·P applied matrix-free through `levels`
/// nested coarsenings; one apply costs one fine-grid apply plus transfers.
pub struct GalerkinOperator<'a, Op: LinearOperator + ?Sized> {
    fine: &'a Op,
    stencil: &'a AveragingStencil,
    fine_blocks: usize,
    levels: usize,
}

impl<'a, Op: LinearOperator + ?Sized> GalerkinOperator<'a, Op> {
    pub fn new(fine: &'a Op, stencil: &'a AveragingStencil, levels: usize) -> Self {
        let fine_blocks = fine.dim() / BLOCK;
        debug_assert_eq!(fine_blocks % (1 << levels), 0);
        Self {
            fine,
            stencil,
            fine_blocks,
            levels,
        }
    }
}

impl<Op: LinearOperator + ?Sized> LinearOperator for GalerkinOperator<'_, Op> {
    fn dim(&self) -> usize {
        BLOCK * (self.fine_blocks >> self.levels)
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let mut v = KktVector::from_vec(x.to_vec()).expect("block-aligned input");
        for _ in 0..self.levels {
            v = prolong_vector(&v, self.stencil);
        }
        let mut fine_out = vec![0.0; self.fine.dim()];
        self.fine.apply(&v, &mut fine_out);
        let mut r = KktVector::from_vec(fine_out).expect("block-aligned");
        for _ in 0..self.levels {
            r = restrict_vector(&r, self.stencil).expect("even block count");
        }
        y.copy_from_slice(&r);
    }
}

/// One Galerkin coarsening R(A(P(w))) without assembling the coarse matrix.
pub fn galerkin_coarse_apply<Op: LinearOperator + ?Sized>(
    fine: &Op,
    stencil: &AveragingStencil,
    w_coarse: &KktVector,
) -> Result<KktVector> {
    let op = GalerkinOperator::new(fine, stencil, 1);
    if w_coarse.len() != op.dim() {
        return Err(Error::DimensionMismatch {
            expected: op.dim(),
            got: w_coarse.len(),
        });
    }
    let mut out = KktVector::zeros(w_coarse.blocks());
    op.apply(w_coarse, &mut out);
    Ok(out)
}

/// Multigrid scheme selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MgScheme {
    Classic,
    MatrixRestriction,
    SolutionRestriction,
}

/// Coarsest-grid solver policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoarseSolver {
    /// Dense direct solve regardless of size (desk scale only).
    Direct,
    /// Dense direct solve up to [`COARSE_DIRECT_MAX_ROWS`] rows, CG to
    /// [`COARSE_KRYLOV_TOL`] beyond that.
    KrylovToTol,
}

/// Multigrid configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MgConfig {
    pub scheme: MgScheme,
    pub smoother: SmootherSpec,
    /// Pre-smoothing iterations per level.
    pub nu1: usize,
    /// Post-smoothing iterations per level.
    pub nu2: usize,
    pub averaging_order: usize,
    /// Coarsening threshold: levels stop once dt ≥ dt_coarse
    /// (classic ignores this and coarsens to a single block row).
    pub dt_coarse: f64,
    pub alpha2: f64,
    pub max_cycles: usize,
    pub rel_tol: f64,
    pub coarse_solver: CoarseSolver,
}

impl MgConfig {
    /// Classic scheme defaults: 10 Gauss-Seidel sweeps around each transfer,
    /// coarsened until one equation remains.
    pub fn classic(alpha2: f64) -> Self {
        Self {
            scheme: MgScheme::Classic,
            smoother: SmootherSpec::new(SmootherKind::BlockGaussSeidel, 10),
            nu1: 10,
            nu2: 10,
            averaging_order: 1,
            dt_coarse: f64::INFINITY,
            alpha2,
            max_cycles: 100,
            rel_tol: 1e-10,
            coarse_solver: CoarseSolver::KrylovToTol,
        }
    }

    /// Matrix-restriction defaults: CG smoothing, 4th-order averaging.
    pub fn matrix_restriction(alpha2: f64, dt_coarse: f64) -> Self {
        Self {
            scheme: MgScheme::MatrixRestriction,
            smoother: SmootherSpec::new(SmootherKind::ConjugateGradient, 30),
            nu1: 30,
            nu2: 30,
            averaging_order: 4,
            dt_coarse,
            alpha2,
            max_cycles: 30,
            rel_tol: 1e-10,
            coarse_solver: CoarseSolver::KrylovToTol,
        }
    }

    /// Solution-restriction defaults: MINRES smoothing, 3rd-order averaging.
    pub fn solution_restriction(alpha2: f64, dt_coarse: f64) -> Self {
        Self {
            scheme: MgScheme::SolutionRestriction,
            smoother: SmootherSpec::new(SmootherKind::Minres, 30),
            nu1: 30,
            nu2: 30,
            averaging_order: 3,
            dt_coarse,
            alpha2,
            max_cycles: 30,
            rel_tol: 1e-10,
            coarse_solver: CoarseSolver::KrylovToTol,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.smoother.validate()?;
        if self.nu1 + self.nu2 == 0 {
            return Err(Error::Config("nu1 + nu2 must be at least 1".into()));
        }
        if self.max_cycles == 0 {
            return Err(Error::Config("max_cycles must be at least 1".into()));
        }
        if !(1..=5).contains(&self.averaging_order) {
            return Err(Error::BadOrder {
                order: self.averaging_order,
            });
        }
        if !(self.alpha2 > 0.0) {
            return Err(Error::Config(format!(
                "alpha2 must be positive, got {}",
                self.alpha2
            )));
        }
        if !(self.dt_coarse > 0.0) {
            return Err(Error::Config(format!(
                "dt_coarse must be positive, got {}",
                self.dt_coarse
            )));
        }
        if self.scheme == MgScheme::MatrixRestriction
            && self.smoother.kind == SmootherKind::BlockGaussSeidel
        {
            return Err(Error::Config(
                "matrix restriction has no explicit coarse blocks; use a Krylov smoother".into(),
            ));
        }
        Ok(())
    }
}

/// One assembled grid level.
#[derive(Clone, Debug)]
pub struct AssembledLevel {
    pub traj: Trajectory,
    pub blocks: KktBlocks,
    pub tridiag: BlockTridiag,
    pub dt: f64,
}

fn assemble_level(
    traj: Trajectory,
    p: &LorenzParams,
    which: Param,
    alpha2: f64,
) -> Result<AssembledLevel> {
    let blocks = assemble_blocks(&traj, p, which, alpha2)?;
    let tridiag = schur_blocks(&blocks);
    let dt = traj.dt;
    Ok(AssembledLevel {
        traj,
        blocks,
        tridiag,
        dt,
    })
}

/// Grid hierarchy; level 0 is finest.
///
/// Classic and solution restriction assemble every level; matrix restriction
/// assembles only the fine level and realizes coarse operators through the
/// Galerkin triple product.
pub struct GridHierarchy {
    pub scheme: MgScheme,
    pub stencil: AveragingStencil,
    /// Assembled levels (all of them for classic/solution restriction, just
    /// the finest for matrix restriction).
    pub levels: Vec<AssembledLevel>,
    /// Block rows per level, finest first.
    pub sizes: Vec<usize>,
    /// Time step per level.
    pub dts: Vec<f64>,
}

enum LevelOp<'a> {
    Tridiag(&'a BlockTridiag),
    Galerkin(GalerkinOperator<'a, BlockTridiag>),
}

impl LinearOperator for LevelOp<'_> {
    fn dim(&self) -> usize {
        match self {
            LevelOp::Tridiag(a) => a.dim(),
            LevelOp::Galerkin(g) => g.dim(),
        }
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        match self {
            LevelOp::Tridiag(a) => a.apply(x, y),
            LevelOp::Galerkin(g) => g.apply(x, y),
        }
    }
}

impl GridHierarchy {
    pub fn num_levels(&self) -> usize {
        self.sizes.len()
    }

    fn operator(&self, level: usize) -> LevelOp<'_> {
        match self.scheme {
            MgScheme::MatrixRestriction if level > 0 => LevelOp::Galerkin(GalerkinOperator::new(
                &self.levels[0].tridiag,
                &self.stencil,
                level,
            )),
            _ => LevelOp::Tridiag(&self.levels[level].tridiag),
        }
    }

    /// Explicit blocks at a level, when the scheme assembles them.
    pub fn assembled(&self, level: usize) -> Option<&AssembledLevel> {
        self.levels.get(level).filter(|_| {
            self.scheme != MgScheme::MatrixRestriction || level == 0
        })
    }
}

/// Number of coarsenings until dt ≥ dt_coarse (at least one).
fn coarsenings_to_threshold(dt_f: f64, dt_coarse: f64) -> Result<u32> {
    if dt_f >= dt_coarse {
        return Err(Error::Config(format!(
            "dt_coarse {dt_coarse} must exceed the fine step {dt_f} by at least one doubling"
        )));
    }
    let mut k = 0u32;
    let mut dt = dt_f;
    while dt < dt_coarse {
        dt *= 2.0;
        k += 1;
    }
    Ok(k)
}

/// Builds the level hierarchy for the configured scheme.
pub fn build_hierarchy(
    traj: &Trajectory,
    p: &LorenzParams,
    which: Param,
    cfg: &MgConfig,
) -> Result<GridHierarchy> {
    cfg.validate()?;
    let m = traj.steps();
    let dt_f = traj.dt;

    let coarsenings = match cfg.scheme {
        MgScheme::Classic => {
            if !m.is_power_of_two() {
                return Err(Error::NotCoarsenable {
                    steps: m,
                    levels: m.trailing_zeros().max(1),
                });
            }
            m.trailing_zeros()
        }
        _ => {
            let k = coarsenings_to_threshold(dt_f, cfg.dt_coarse)?;
            if m % (1usize << k) != 0 || m >> k == 0 {
                return Err(Error::NotCoarsenable { steps: m, levels: k });
            }
            k
        }
    };

    let stencil = averaging_weights(cfg.averaging_order)?;
    let sizes: Vec<usize> = (0..=coarsenings).map(|k| m >> k).collect();
    let dts: Vec<f64> = (0..=coarsenings)
        .map(|k| dt_f * (1u64 << k) as f64)
        .collect();

    let mut levels = vec![assemble_level(traj.clone(), p, which, cfg.alpha2)?];
    match cfg.scheme {
        MgScheme::MatrixRestriction => {}
        MgScheme::Classic => {
            let mut t = traj.clone();
            for _ in 0..coarsenings {
                let states: Vec<_> = t.states.iter().copied().step_by(2).collect();
                t = Trajectory::new(states, 2.0 * t.dt, t.t0)?;
                levels.push(assemble_level(t.clone(), p, which, cfg.alpha2)?);
            }
        }
        MgScheme::SolutionRestriction => {
            let mut t = traj.clone();
            for _ in 0..coarsenings {
                t = restrict_solution(&t, &stencil)?;
                levels.push(assemble_level(t.clone(), p, which, cfg.alpha2)?);
            }
        }
    }

    Ok(GridHierarchy {
        scheme: cfg.scheme,
        stencil,
        levels,
        sizes,
        dts,
    })
}

/// Injection restriction on the multiplier grid (coarse j = fine 2j+1).
fn inject_residual(fine: &KktVector) -> KktVector {
    let mc = fine.blocks() / 2;
    let mut out = KktVector::zeros(mc);
    for j in 0..mc {
        out.set_block(j, &fine.block(2 * j + 1));
    }
    out
}

/// Linear-interpolation prolongation paired with injection.
fn prolong_linear(coarse: &KktVector, fine_blocks: usize) -> KktVector {
    let mc = coarse.blocks();
    let mut out = KktVector::zeros(fine_blocks);
    for j in 0..mc {
        out.set_block(2 * j + 1, &coarse.block(j));
    }
    for k in 0..mc {
        let left = if k == 0 {
            nalgebra::Vector3::zeros()
        } else {
            coarse.block(k - 1)
        };
        let mid = 0.5 * (left + coarse.block(k));
        out.set_block(2 * k, &mid);
    }
    out
}

fn smooth(
    hier: &GridHierarchy,
    level: usize,
    w: &mut KktVector,
    rhs: &KktVector,
    sweeps: usize,
    cfg: &MgConfig,
) -> Result<()> {
    if sweeps == 0 {
        return Ok(());
    }
    match cfg.smoother.kind {
        SmootherKind::BlockGaussSeidel => {
            let tridiag = &hier
                .assembled(level)
                .ok_or_else(|| {
                    Error::Config("Gauss-Seidel smoothing needs assembled blocks".into())
                })?
                .tridiag;
            let omega = under_relaxation(hier.dts[level], hier.dts[0], cfg.smoother.omega);
            block_gauss_seidel(tridiag, w, rhs, sweeps, omega)?;
        }
        SmootherKind::ConjugateGradient => {
            let op = hier.operator(level);
            conjugate_gradient(&op, w, rhs, sweeps, 1e-14)?;
        }
        SmootherKind::Minres => {
            let op = hier.operator(level);
            minres(&op, w, rhs, sweeps, 1e-14)?;
        }
    }
    Ok(())
}

fn coarse_solve(
    hier: &GridHierarchy,
    level: usize,
    w: &mut KktVector,
    rhs: &KktVector,
    cfg: &MgConfig,
) -> Result<()> {
    let rows = hier.sizes[level];
    let direct = cfg.coarse_solver == CoarseSolver::Direct || rows <= COARSE_DIRECT_MAX_ROWS;
    if direct {
        let dense = match hier.operator(level) {
            LevelOp::Tridiag(a) => crate::dense::to_dense(a),
            LevelOp::Galerkin(g) => crate::dense::operator_to_dense(&g),
        };
        let sol = crate::dense::dense_solve(
            &dense,
            &nalgebra::DVector::from_column_slice(rhs),
        )?;
        w.copy_from_slice(sol.as_slice());
    } else {
        let op = hier.operator(level);
        let max_iters = (4 * op.dim()).min(1500);
        conjugate_gradient(&op, w, rhs, max_iters, COARSE_KRYLOV_TOL)?;
    }
    Ok(())
}

/// One V-cycle at `level`: ν₁ smoothing sweeps, residual restriction,
/// recursive coarse correction, prolongated correction, ν₂ sweeps.
pub fn v_cycle(
    hier: &GridHierarchy,
    level: usize,
    w: &mut KktVector,
    rhs: &KktVector,
    cfg: &MgConfig,
) -> Result<()> {
    if level + 1 == hier.num_levels() {
        return coarse_solve(hier, level, w, rhs, cfg);
    }

    smooth(hier, level, w, rhs, cfg.nu1, cfg)?;

    let op = hier.operator(level);
    let mut r = KktVector::zeros(hier.sizes[level]);
    op.apply(w, &mut r);
    for (ri, bi) in r.iter_mut().zip(rhs.iter()) {
        *ri = bi - *ri;
    }

    let rc = match hier.scheme {
        MgScheme::Classic => inject_residual(&r),
        _ => restrict_vector(&r, &hier.stencil)?,
    };
    let mut ec = KktVector::zeros(hier.sizes[level + 1]);
    v_cycle(hier, level + 1, &mut ec, &rc, cfg)?;

    let ef = match hier.scheme {
        MgScheme::Classic => prolong_linear(&ec, hier.sizes[level]),
        _ => prolong_vector(&ec, &hier.stencil),
    };
    for (wi, ei) in w.iter_mut().zip(ef.iter()) {
        *wi += ei;
    }

    smooth(hier, level, w, rhs, cfg.nu2, cfg)
}

fn diverged(initial: f64, current: f64) -> bool {
    !current.is_finite() || current > DIVERGENCE_FACTOR * initial
}

fn scheme_name(scheme: MgScheme) -> &'static str {
    match scheme {
        MgScheme::Classic => "classic-mg",
        MgScheme::MatrixRestriction => "matrix-mg",
        MgScheme::SolutionRestriction => "solution-mg",
    }
}

/// Repeats V-cycles until `rel_tol` or `max_cycles`, recording per-cycle
/// residual norms and sensitivity estimates (J = z̄).
pub fn mg_solve(
    traj: &Trajectory,
    p: &LorenzParams,
    which: Param,
    cfg: &MgConfig,
) -> Result<(KktVector, SolveReport)> {
    let start = Instant::now();
    let hier = build_hierarchy(traj, p, which, cfg)?;
    let fine = &hier.levels[0];
    let rhs = rhs_vector(&fine.blocks);
    let rhs_norm = rhs.norm();
    let m = traj.steps();

    let mut report = SolveReport::new(scheme_name(cfg.scheme));
    report.residual_history.push(rhs_norm);
    report.gradient_history.push(0.0);

    let per_cycle = match cfg.scheme {
        MgScheme::MatrixRestriction => {
            cost::matrix_mg_cycle(m, BLOCK, hier.num_levels(), cfg.nu1, cfg.nu2)
        }
        _ => cost::solution_mg_cycle(m, BLOCK, cfg.nu1, cfg.nu2),
    };

    let mut w = KktVector::zeros(m);
    for _cycle in 1..=cfg.max_cycles {
        v_cycle(&hier, 0, &mut w, &rhs, cfg)?;
        let r = residual_norm(&fine.tridiag, &w, &rhs)?;
        report.residual_history.push(r);
        let g = gradient(traj, &recover_tangent(&fine.blocks, &w), &MeanZ);
        report.gradient_history.push(g);

        if diverged(rhs_norm, r) {
            report.cycles = report.residual_history.len() - 1;
            report.estimated_flops = per_cycle * report.cycles as f64;
            report.wall_time_s = start.elapsed().as_secs_f64();
            return Err(Error::Diverged {
                growth: r / rhs_norm,
                report: Box::new(report),
            });
        }
        if r <= cfg.rel_tol * rhs_norm {
            report.converged = true;
            break;
        }
    }

    report.cycles = report.residual_history.len() - 1;
    report.final_gradient = report.gradient_history.last().copied();
    report.estimated_flops = per_cycle * report.cycles as f64;
    report.wall_time_s = start.elapsed().as_secs_f64();
    report.fit_rate();
    Ok((w, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense;
    use crate::dynamics::seeded_trajectory;
    use crate::operator::dot;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(seed: u64, blocks: usize) -> KktVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        KktVector::from_vec((0..3 * blocks).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn lorenz_level(seed: u64, m: usize, dt: f64) -> AssembledLevel {
        let p = LorenzParams::default();
        let traj = seeded_trajectory(seed, dt, m, 100.0, &p).unwrap();
        assemble_level(traj, &p, Param::R, 40.0).unwrap()
    }

    /// Dense restriction matrix over scalar entries (blocks of 3).
    fn dense_restriction(m: usize, stencil: &AveragingStencil) -> DMatrix<f64> {
        let mc = m / 2;
        let mut r = DMatrix::zeros(3 * mc, 3 * m);
        for j in 0..mc {
            for (o, w) in stencil.vector_offsets().iter().zip(&stencil.weights) {
                let fr = 2 * j as isize + 1 + o;
                if (0..m as isize).contains(&fr) {
                    for c in 0..3 {
                        r[(3 * j + c, 3 * fr as usize + c)] = *w;
                    }
                }
            }
        }
        r
    }

    #[test]
    fn stencil_weights_match_the_listed_averages() {
        let s2 = averaging_weights(2).unwrap();
        assert_eq!(s2.weights, vec![0.25, 0.5, 0.25]);
        let s4 = averaging_weights(4).unwrap();
        assert_eq!(
            s4.weights,
            vec![1.0 / 16.0, 0.25, 3.0 / 8.0, 0.25, 1.0 / 16.0]
        );
        for order in 1..=5 {
            let s = averaging_weights(order).unwrap();
            assert_eq!(s.weights.len(), order + 1);
            let sum: f64 = s.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-15, "order {order} sums to {sum}");
            assert_eq!(s.staggered, order % 2 == 1);
        }
        assert!(matches!(averaging_weights(0), Err(Error::BadOrder { .. })));
        assert!(matches!(averaging_weights(6), Err(Error::BadOrder { .. })));
    }

    #[test]
    fn restriction_preserves_interior_constants() {
        for order in 1..=5 {
            let stencil = averaging_weights(order).unwrap();
            let m = 16;
            let fine = KktVector::from_vec(vec![3.5; 3 * m]).unwrap();
            let coarse = restrict_vector(&fine, &stencil).unwrap();
            // Skip boundary-clipped coarse blocks.
            for j in 2..coarse.blocks() - 2 {
                assert!(
                    (coarse.block(j) - nalgebra::Vector3::from_element(3.5)).norm() < 1e-14,
                    "order {order} block {j}"
                );
            }
        }
    }

    #[test]
    fn order2_restriction_is_exact_on_linear_ramp() {
        let stencil = averaging_weights(2).unwrap();
        let m = 12;
        let fine =
            KktVector::from_vec((0..3 * m).map(|i| (i / 3) as f64).collect()).unwrap();
        let coarse = restrict_vector(&fine, &stencil).unwrap();
        for j in 1..coarse.blocks() - 1 {
            let expect = (2 * j + 1) as f64;
            assert!((coarse.block(j).x - expect).abs() < 1e-13, "block {j}");
        }
    }

    #[test]
    fn restriction_is_half_transposed_prolongation() {
        for order in 1..=5 {
            let stencil = averaging_weights(order).unwrap();
            let f = random_vec(order as u64, 16);
            let c = random_vec(order as u64 + 50, 8);
            let lhs = dot(&restrict_vector(&f, &stencil).unwrap(), &c);
            let rhs = TRANSFER_SCALE * dot(&f, &prolong_vector(&c, &stencil));
            assert!(
                (lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0),
                "order {order}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn prolongation_preserves_interior_constants_and_zero() {
        for order in 1..=5 {
            let stencil = averaging_weights(order).unwrap();
            let coarse = KktVector::from_vec(vec![2.0; 3 * 8]).unwrap();
            let fine = prolong_vector(&coarse, &stencil);
            for r in 4..fine.blocks() - 4 {
                assert!(
                    (fine.block(r) - nalgebra::Vector3::from_element(2.0)).norm() < 1e-13,
                    "order {order} row {r}"
                );
            }
            let zero = prolong_vector(&KktVector::zeros(8), &stencil);
            assert_eq!(zero.norm(), 0.0);
        }
    }

    #[test]
    fn restrict_then_prolong_is_second_order_on_smooth_data() {
        let stencil = averaging_weights(2).unwrap();
        let err_at = |m: usize| {
            let h = 1.0 / m as f64;
            let fine = KktVector::from_vec(
                (0..3 * m)
                    .map(|i| {
                        let r = i / 3;
                        let t = (r as f64 + 0.5) * h;
                        (std::f64::consts::PI * t).sin()
                    })
                    .collect(),
            )
            .unwrap();
            let back = prolong_vector(&restrict_vector(&fine, &stencil).unwrap(), &stencil);
            (8..m - 8)
                .map(|r| (back.block(r).x - fine.block(r).x).abs())
                .fold(0.0, f64::max)
        };
        let e1 = err_at(64);
        let e2 = err_at(128);
        let ratio = e1 / e2;
        assert!(
            (3.2..4.8).contains(&ratio),
            "refinement ratio {ratio} (errors {e1:.3e}, {e2:.3e})"
        );
    }

    #[test]
    fn restrict_solution_constant_and_shape() {
        let u = nalgebra::Vector3::new(1.0, -2.0, 3.0);
        let traj = Trajectory::new(vec![u; 9], 0.1, 0.0).unwrap();
        for order in 1..=5 {
            let stencil = averaging_weights(order).unwrap();
            let coarse = restrict_solution(&traj, &stencil).unwrap();
            assert_eq!(coarse.steps(), 4);
            assert_eq!(coarse.dt, 0.2);
            for s in &coarse.states {
                assert!((s - u).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn restrict_solution_order1_uses_straddling_nodes() {
        let states: Vec<_> = (0..5)
            .map(|i| nalgebra::Vector3::new(i as f64, 0.0, 0.0))
            .collect();
        let traj = Trajectory::new(states, 0.1, 0.0).unwrap();
        let stencil = averaging_weights(1).unwrap();
        let coarse = restrict_solution(&traj, &stencil).unwrap();
        assert_eq!(coarse.states.len(), 3);
        assert_eq!(coarse.states[0].x, 0.0); // endpoint copied
        assert_eq!(coarse.states[2].x, 4.0); // endpoint copied
        assert!((coarse.states[1].x - 2.0).abs() < 1e-15); // ½u_1 + ½u_3
    }

    #[test]
    fn restrict_solution_rejects_odd_step_count() {
        let traj = Trajectory::new(vec![nalgebra::Vector3::zeros(); 6], 0.1, 0.0).unwrap();
        let stencil = averaging_weights(2).unwrap();
        assert!(matches!(
            restrict_solution(&traj, &stencil),
            Err(Error::NotCoarsenable { steps: 5, .. })
        ));
    }

    #[test]
    fn restrict_solution_preserves_time_average_to_second_order() {
        let smooth_traj = |m: usize| {
            let dt = 1.0 / m as f64;
            let states = (0..=m)
                .map(|i| {
                    let t = i as f64 * dt;
                    nalgebra::Vector3::new(t.cos(), t.sin(), (2.0 * t).sin())
                })
                .collect();
            Trajectory::new(states, dt, 0.0).unwrap()
        };
        let stencil = averaging_weights(2).unwrap();
        let diff_at = |m: usize| {
            let t = smooth_traj(m);
            let c = restrict_solution(&t, &stencil).unwrap();
            let avg = |t: &Trajectory| {
                crate::sensitivity::time_average(&t.clone(), &crate::sensitivity::MeanZ)
            };
            (avg(&t) - avg(&c)).abs()
        };
        let d1 = diff_at(64);
        let d2 = diff_at(128);
        assert!(d2 < d1, "coarsening error not shrinking: {d1} vs {d2}");
        assert!(d1 / d2 > 2.5, "not O(dt²): ratio {}", d1 / d2);
    }

    #[test]
    fn classic_coarsen_samples_every_second_row() {
        let level = lorenz_level(0, 4, 0.01);
        let rhs = rhs_vector(&level.blocks);
        let (coarse, crhs) = classic_coarsen(&level.tridiag, &rhs).unwrap();
        assert_eq!(coarse.rows(), 2);
        // D'_j = D_{2j} (1-indexed), i.e. fine rows 1 and 3 (0-indexed).
        assert_eq!(coarse.diag[0], level.tridiag.diag[1]);
        assert_eq!(coarse.diag[1], level.tridiag.diag[3]);
        assert_eq!(crhs.block(0), rhs.block(1));
        assert_eq!(crhs.block(1), rhs.block(3));
    }

    #[test]
    fn galerkin_apply_matches_dense_triple_product() {
        let level = lorenz_level(1, 16, 0.01);
        for order in [1, 4] {
            let stencil = averaging_weights(order).unwrap();
            let r = dense_restriction(16, &stencil);
            let p = r.transpose() / TRANSFER_SCALE;
            let a = dense::to_dense(&level.tridiag);
            let coarse_dense = &r * &a * &p;

            let x = random_vec(order as u64, 8);
            let by_operator = galerkin_coarse_apply(&level.tridiag, &stencil, &x).unwrap();
            let by_dense = &coarse_dense * DVector::from_column_slice(&x);
            let err = by_operator
                .iter()
                .zip(by_dense.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-12 * by_dense.abs().max(), "order {order}: {err:.3e}");
        }
    }

    #[test]
    fn galerkin_coarse_operator_is_symmetric_and_spd() {
        let level = lorenz_level(2, 32, 0.01);
        let stencil = averaging_weights(4).unwrap();
        let x = random_vec(3, 16);
        let y = random_vec(4, 16);
        let ax = galerkin_coarse_apply(&level.tridiag, &stencil, &x).unwrap();
        let ay = galerkin_coarse_apply(&level.tridiag, &stencil, &y).unwrap();
        let lhs = dot(&ax, &y);
        let rhs = dot(&x, &ay);
        assert!((lhs - rhs).abs() < 1e-11 * lhs.abs().max(1.0));

        let op = GalerkinOperator::new(&level.tridiag, &stencil, 1);
        let dense = dense::operator_to_dense(&op);
        let eig = ((&dense + dense.transpose()) * 0.5).symmetric_eigen();
        assert!(eig.eigenvalues.min() > 0.0);
    }

    #[test]
    fn hierarchy_stops_at_coarsening_threshold() {
        let p = LorenzParams::default();
        let traj = seeded_trajectory(5, 0.004, 128, 10.0, &p).unwrap();
        let cfg = MgConfig::solution_restriction(40.0, 0.2);
        let hier = build_hierarchy(&traj, &p, Param::R, &cfg).unwrap();
        // 0.004 -> 0.256 needs 6 doublings.
        assert_eq!(hier.num_levels(), 7);
        assert_eq!(hier.sizes, vec![128, 64, 32, 16, 8, 4, 2]);
        assert!((hier.dts[6] - 0.256).abs() < 1e-12);
    }

    #[test]
    fn classic_hierarchy_reaches_single_row() {
        let p = LorenzParams::default();
        let traj = seeded_trajectory(6, 0.01, 8, 10.0, &p).unwrap();
        let cfg = MgConfig::classic(40.0);
        let hier = build_hierarchy(&traj, &p, Param::R, &cfg).unwrap();
        assert_eq!(hier.sizes, vec![8, 4, 2, 1]);
        assert_eq!(hier.num_levels(), 4); // 3 levels below the fine grid
    }

    #[test]
    fn hierarchy_rejects_indivisible_step_count() {
        let p = LorenzParams::default();
        let traj = seeded_trajectory(7, 0.004, 96, 10.0, &p).unwrap();
        let cfg = MgConfig::solution_restriction(40.0, 0.2);
        assert!(matches!(
            build_hierarchy(&traj, &p, Param::R, &cfg),
            Err(Error::NotCoarsenable { steps: 96, .. })
        ));
    }

    #[test]
    fn solution_level_equals_reassembled_restriction() {
        let p = LorenzParams::default();
        let traj = seeded_trajectory(8, 0.01, 16, 10.0, &p).unwrap();
        let cfg = MgConfig::solution_restriction(40.0, 0.02);
        let hier = build_hierarchy(&traj, &p, Param::R, &cfg).unwrap();
        let stencil = averaging_weights(cfg.averaging_order).unwrap();
        let expect = assemble_blocks(
            &restrict_solution(&traj, &stencil).unwrap(),
            &p,
            Param::R,
            40.0,
        )
        .unwrap();
        let got = &hier.levels[1].blocks;
        for i in 0..expect.steps() {
            assert!((expect.f_blocks[i] - got.f_blocks[i]).abs().max() < 1e-14);
            assert!((expect.forcing[i] - got.forcing[i]).norm() < 1e-14);
        }
    }

    #[test]
    fn v_cycle_fixes_zero() {
        let p = LorenzParams::default();
        let traj = seeded_trajectory(9, 0.01, 16, 10.0, &p).unwrap();
        let cfg = MgConfig::solution_restriction(40.0, 0.02);
        let hier = build_hierarchy(&traj, &p, Param::R, &cfg).unwrap();
        let mut w = KktVector::zeros(16);
        v_cycle(&hier, 0, &mut w, &KktVector::zeros(16), &cfg).unwrap();
        assert_eq!(w.norm(), 0.0);
    }

    #[test]
    fn v_cycle_with_exact_pieces_is_idempotent() {
        let p = LorenzParams::default();
        let traj = seeded_trajectory(10, 0.01, 8, 10.0, &p).unwrap();
        let mut cfg = MgConfig::solution_restriction(40.0, 0.02);
        cfg.nu1 = 24; // CG at full dimension smooths exactly
        cfg.nu2 = 24;
        cfg.smoother = SmootherSpec::new(SmootherKind::ConjugateGradient, 24);
        let hier = build_hierarchy(&traj, &p, Param::R, &cfg).unwrap();
        let rhs = rhs_vector(&hier.levels[0].blocks);
        let mut w = KktVector::zeros(8);
        v_cycle(&hier, 0, &mut w, &rhs, &cfg).unwrap();
        let first = w.clone();
        v_cycle(&hier, 0, &mut w, &rhs, &cfg).unwrap();
        let change = w
            .iter()
            .zip(first.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(change < 1e-10 * first.norm(), "change {change:.3e}");
    }

    #[test]
    fn mg_solve_solution_restriction_smoke() {
        let p = LorenzParams::default();
        let traj = seeded_trajectory(11, 0.01, 64, 100.0, &p).unwrap();
        let mut cfg = MgConfig::solution_restriction(40.0, 0.04);
        cfg.max_cycles = 40;
        cfg.rel_tol = 1e-9;
        let (w, report) = mg_solve(&traj, &p, Param::R, &cfg).unwrap();
        assert!(report.converged, "history {:?}", report.relative_residuals());
        assert_eq!(w.blocks(), 64);
        assert!(report.final_gradient.unwrap().is_finite());
        assert_eq!(
            report.residual_history.len(),
            report.gradient_history.len()
        );
        // Matches the direct solve.
        let blocks = assemble_blocks(&traj, &p, Param::R, 40.0).unwrap();
        let a = schur_blocks(&blocks);
        let exact = crate::sensitivity::direct_solve(&a, &rhs_vector(&blocks)).unwrap();
        let err = w
            .iter()
            .zip(exact.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / exact.norm();
        assert!(err < 1e-6, "solution error {err:.3e}");
    }

    #[test]
    fn mg_solve_classic_is_stable_under_the_omega_schedule() {
        let p = LorenzParams::default();
        let traj = seeded_trajectory(12, 0.01, 64, 100.0, &p).unwrap();
        let mut cfg = MgConfig::classic(40.0);
        cfg.max_cycles = 20;
        let (_, report) = mg_solve(&traj, &p, Param::R, &cfg).unwrap();
        let rel = report.relative_residuals();
        for r in &rel {
            assert!(r.is_finite() && *r < 10.0, "residual escaped: {rel:?}");
        }
        assert!(rel.last().unwrap() < &1.0, "no reduction at all: {rel:?}");
    }

    #[test]
    fn divergence_guard_trips_on_growth() {
        assert!(super::diverged(1.0, f64::NAN));
        assert!(super::diverged(1.0, 2e6));
        assert!(!super::diverged(1.0, 0.5));
    }

    #[test]
    fn config_rejects_gs_for_matrix_restriction() {
        let mut cfg = MgConfig::matrix_restriction(40.0, 0.1);
        cfg.smoother = SmootherSpec::new(SmootherKind::BlockGaussSeidel, 10);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
