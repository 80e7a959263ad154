//! Two-level hierarchical QP controller: a slack-relaxed RCM task at the top
//! priority, an image-space tracking task projected into its null space, and
//! the pseudoinverse baseline both levels generalize.
//!
//! The stacked optimization variable at each level is `x = [qdot; w]` with
//! `w` a free 2n slack vector on the joint velocity bounds, so every block
//! has `3n` columns.

use nalgebra::{DMatrix, DVector, Matrix2xX, RowDVector, Vector2, Vector3};

use crate::error::{ConfigError, GeometryError};
use crate::kinematics::{JointVector, KinematicChain};
use crate::qp::{QpProblem, QpSettings, QpSolver, QpStatus};
use crate::rcm::{compute_rcm_state, rcm_jacobian_with_direction, RcmState, TrocarConfig};
use crate::visual::{project, visual_jacobian_at, CameraIntrinsics, ImagePoint, Marker};

/// Proportional gains converting task errors into velocity targets, and the
/// relative singular-value cutoff used by pseudoinverses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HqpGains {
    /// RCM error feedback gain (1/s).
    pub k_rcm: f64,
    /// Pixel error feedback gain (1/s).
    pub k_vis: f64,
    /// Cutoff for pseudoinverse singular values.
    pub svd_tolerance: f64,
}

impl HqpGains {
    /// Defaults for a control period `dt`: `k_rcm = 0.8/dt` clipped to
    /// 200 1/s, `k_vis = 2`.
    pub fn defaults_for_dt(dt: f64) -> Self {
        Self { k_rcm: (0.8 / dt).min(200.0), k_vis: 2.0, svd_tolerance: 1e-8 }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.k_rcm > 0.0 && self.k_vis > 0.0 && self.svd_tolerance > 0.0) {
            return Err(ConfigError::new("gains must be positive"));
        }
        Ok(())
    }
}

/// Joint position limits used to bound velocities over one control period.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLimits {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl JointLimits {
    pub fn of_chain(chain: &KinematicChain) -> Self {
        Self { lower: chain.q_min(), upper: chain.q_max() }
    }
}

/// Assembled QP data for one hierarchy level.
#[derive(Debug, Clone)]
pub struct LevelBlocks {
    /// Stacked task matrix over `[qdot; w]`.
    pub a_bar: DMatrix<f64>,
    /// Stacked task target.
    pub b_bar: DVector<f64>,
    /// `a_bar^T a_bar`.
    pub q: DMatrix<f64>,
    /// `-a_bar^T b_bar`.
    pub p: DVector<f64>,
    /// Velocity-bound rows acting on the qdot part of `x`.
    pub c: DMatrix<f64>,
    /// Velocity-bound right-hand side.
    pub d: DVector<f64>,
    /// Full constraint matrix `[C  -I]`.
    pub g: DMatrix<f64>,
}

impl LevelBlocks {
    fn assemble(
        task: &DMatrix<f64>,
        target: &DVector<f64>,
        c: DMatrix<f64>,
        d: DVector<f64>,
    ) -> Self {
        let n = task.ncols();
        let rows = task.nrows();
        let mut a_bar = DMatrix::zeros(rows + 2 * n, 3 * n);
        a_bar.view_mut((0, 0), (rows, n)).copy_from(task);
        a_bar
            .view_mut((rows, n), (2 * n, 2 * n))
            .copy_from(&DMatrix::identity(2 * n, 2 * n));
        let mut b_bar = DVector::zeros(rows + 2 * n);
        b_bar.rows_mut(0, rows).copy_from(target);

        let q = a_bar.transpose() * &a_bar;
        let p = -(a_bar.transpose() * &b_bar);

        let mut g = DMatrix::zeros(2 * n, 3 * n);
        g.view_mut((0, 0), (2 * n, n)).copy_from(&c);
        g.view_mut((0, n), (2 * n, 2 * n))
            .copy_from(&(-DMatrix::<f64>::identity(2 * n, 2 * n)));

        Self { a_bar, b_bar, q, p, c, d, g }
    }

    pub fn to_problem(&self) -> QpProblem {
        QpProblem::new(self.q.clone(), self.p.clone(), self.g.clone(), self.d.clone())
            .expect("level blocks form a valid QP")
    }
}

/// Level-1 blocks: drive `j_rcm qdot` to `k_rcm e_rcm` subject to the
/// slack-relaxed joint velocity bounds.
pub fn build_level1(
    j_rcm: &RowDVector<f64>,
    e_rcm: f64,
    gains: &HqpGains,
    q: &JointVector,
    limits: &JointLimits,
    dt: f64,
) -> Result<LevelBlocks, ConfigError> {
    if !(dt > 0.0) {
        return Err(ConfigError::new("control period dt must be positive"));
    }
    let n = j_rcm.ncols();
    let task = DMatrix::from_rows(std::slice::from_ref(j_rcm));
    let target = DVector::from_element(1, gains.k_rcm * e_rcm);

    let mut c = DMatrix::zeros(2 * n, n);
    c.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
    c.view_mut((n, 0), (n, n)).copy_from(&(-DMatrix::<f64>::identity(n, n)));
    let mut d = DVector::zeros(2 * n);
    for i in 0..n {
        d[i] = (limits.upper[i] - q[i]) / dt;
        d[n + i] = -(limits.lower[i] - q[i]) / dt;
    }
    Ok(LevelBlocks::assemble(&task, &target, c, d))
}

/// Null-space projector of the RCM task row: `N1 = I - j^+ j` with the
/// closed-form row pseudoinverse, or the identity when the row vanishes.
pub fn null_space_projector(j_rcm: &RowDVector<f64>, svd_tolerance: f64) -> DMatrix<f64> {
    let n = j_rcm.ncols();
    let norm_sq = j_rcm.iter().map(|v| v * v).sum::<f64>();
    if norm_sq.sqrt() <= svd_tolerance {
        return DMatrix::identity(n, n);
    }
    DMatrix::identity(n, n) - j_rcm.transpose() * j_rcm / norm_sq
}

/// Level-2 blocks: the qdot part of `x` is the null-space coordinate, so the
/// visual task matrix is `J_vis N1` and the velocity bounds are shifted by
/// the level-1 solution (constraints act on the composed velocity
/// `N1 qdot + qdot1`).
#[allow(clippy::too_many_arguments)]
pub fn build_level2(
    j_vis: &Matrix2xX<f64>,
    e_vis: &Vector2<f64>,
    gains: &HqpGains,
    qdot1: &DVector<f64>,
    n1: &DMatrix<f64>,
    q: &JointVector,
    limits: &JointLimits,
    dt: f64,
) -> Result<LevelBlocks, ConfigError> {
    if !(dt > 0.0) {
        return Err(ConfigError::new("control period dt must be positive"));
    }
    let n = j_vis.ncols();
    let task = DMatrix::from_iterator(2, n, (j_vis * n1).iter().copied());
    let drive = j_vis * qdot1;
    let target = DVector::from_column_slice(&[
        -gains.k_vis * e_vis[0] - drive[0],
        -gains.k_vis * e_vis[1] - drive[1],
    ]);

    let mut c = DMatrix::zeros(2 * n, n);
    c.view_mut((0, 0), (n, n)).copy_from(n1);
    c.view_mut((n, 0), (n, n)).copy_from(&(-n1));
    let mut d = DVector::zeros(2 * n);
    for i in 0..n {
        d[i] = (limits.upper[i] - q[i]) / dt - qdot1[i];
        d[n + i] = -(limits.lower[i] - q[i]) / dt + qdot1[i];
    }
    Ok(LevelBlocks::assemble(&task, &target, c, d))
}

/// Resolved-rate baseline: `qdot = J^+ xdot_des` through an SVD with a
/// relative cutoff on the singular values.
pub fn baseline_pinv_step(
    j: &DMatrix<f64>,
    xdot_des: &DVector<f64>,
    svd_tolerance: f64,
) -> DVector<f64> {
    let svd = j.clone().svd(true, true);
    let sigma_max = svd.singular_values.amax();
    let pinv = svd
        .pseudo_inverse(svd_tolerance * sigma_max)
        .expect("non-negative pseudoinverse cutoff");
    pinv * xdot_des
}

/// Outcome of one hierarchy level as seen by the control loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelStatus {
    Solved,
    MaxIterations,
    PrimalInfeasible,
    /// Level was not attempted because a higher level failed.
    Skipped,
}

impl LevelStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            LevelStatus::Solved => "solved",
            LevelStatus::MaxIterations => "max_iterations",
            LevelStatus::PrimalInfeasible => "primal_infeasible",
            LevelStatus::Skipped => "skipped",
        }
    }
}

impl From<QpStatus> for LevelStatus {
    fn from(status: QpStatus) -> Self {
        match status {
            QpStatus::Solved => LevelStatus::Solved,
            QpStatus::MaxIterations => LevelStatus::MaxIterations,
            QpStatus::PrimalInfeasible => LevelStatus::PrimalInfeasible,
        }
    }
}

/// Result of one control cycle of the two-level hierarchy.
#[derive(Debug, Clone)]
pub struct HqpResult {
    /// Level-1 optimal joint velocity.
    pub qdot1: DVector<f64>,
    /// Level-2 optimal null-space coordinate.
    pub qdot2: DVector<f64>,
    /// Composed solution `N1 qdot2 + qdot1`.
    pub qdot_sol: DVector<f64>,
    pub slack1_norm: f64,
    pub slack2_norm: f64,
    /// Null-space projector of the RCM task.
    pub n1: DMatrix<f64>,
    /// Per-level wall-clock solve time (s).
    pub level1_time: f64,
    pub level2_time: f64,
    pub level1_status: LevelStatus,
    pub level2_status: LevelStatus,
    pub level1_iterations: usize,
    pub level2_iterations: usize,
    /// RCM task row used this cycle (zero when unavailable).
    pub j_rcm: RowDVector<f64>,
}

impl HqpResult {
    /// Extent to which level 2 disturbed the level-1 task value; zero up to
    /// rounding whenever both levels solved.
    pub fn priority_residual(&self) -> f64 {
        ((&self.j_rcm * &self.qdot_sol)[0] - (&self.j_rcm * &self.qdot1)[0]).abs()
    }
}

/// Full outcome of [`HqpController::solve_step`], including the task-space
/// quantities the simulator logs.
#[derive(Debug, Clone)]
pub struct ControlStep {
    pub result: HqpResult,
    pub rcm: RcmState,
    pub pixel: ImagePoint,
    pub e_vis: Vector2<f64>,
    pub depth: f64,
}

/// Two-level HQP controller. Holds warm starts for both QP levels and the
/// previous RCM error direction, so one instance serves one control loop.
#[derive(Debug)]
pub struct HqpController {
    gains: HqpGains,
    qp_settings: QpSettings,
    dt: f64,
    solver1: QpSolver,
    solver2: QpSolver,
    warm1: Option<DVector<f64>>,
    warm2: Option<DVector<f64>>,
    last_p_e: Option<Vector3<f64>>,
}

impl HqpController {
    pub fn new(gains: HqpGains, qp_settings: QpSettings, dt: f64) -> Result<Self, ConfigError> {
        gains.validate()?;
        qp_settings.validate()?;
        if !(dt > 0.0) {
            return Err(ConfigError::new("control period dt must be positive"));
        }
        Ok(Self {
            gains,
            qp_settings,
            dt,
            solver1: QpSolver::new(),
            solver2: QpSolver::new(),
            warm1: None,
            warm2: None,
            last_p_e: None,
        })
    }

    pub fn gains(&self) -> &HqpGains {
        &self.gains
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Drops warm starts and the remembered error direction.
    pub fn reset(&mut self) {
        self.warm1 = None;
        self.warm2 = None;
        self.last_p_e = None;
    }

    /// One control cycle from raw scene data: computes the RCM state and the
    /// marker projection, then solves both levels with the pixel reference at
    /// the image center.
    pub fn solve_step(
        &mut self,
        chain: &KinematicChain,
        q: &JointVector,
        trocar: &TrocarConfig,
        marker: &Marker,
        intrinsics: &CameraIntrinsics,
    ) -> Result<ControlStep, GeometryError> {
        let rcm = compute_rcm_state(chain, q, trocar)?;
        let cam_pose = chain.forward_kinematics(q, chain.camera_frame())?;
        let (pixel, depth) = project(&cam_pose, intrinsics, marker)?;
        let reference = intrinsics.principal_point();
        self.solve_step_with_measurement(chain, q, rcm, intrinsics, &pixel, depth, &reference)
    }

    /// One control cycle from an externally supplied pixel measurement and
    /// reference point (the loop feeds the trajectory-generator output here).
    /// `e_vis` handed to level 2 is `pixel - reference`.
    #[allow(clippy::too_many_arguments)]
    pub fn solve_step_with_measurement(
        &mut self,
        chain: &KinematicChain,
        q: &JointVector,
        rcm: RcmState,
        intrinsics: &CameraIntrinsics,
        pixel: &ImagePoint,
        depth: f64,
        reference: &ImagePoint,
    ) -> Result<ControlStep, GeometryError> {
        let n = chain.num_joints();
        let limits = JointLimits::of_chain(chain);

        // Degenerate RCM error direction: fall back to the previous cycle's
        // direction with a zero target, or to a zero row.
        let (j_rcm, e_target) = if rcm.degenerate {
            let row = match self.last_p_e {
                Some(dir) => rcm_jacobian_with_direction(chain, q, &rcm, &dir)?,
                None => RowDVector::zeros(n),
            };
            (row, 0.0)
        } else {
            self.last_p_e = Some(rcm.p_e_hat);
            (rcm.j_rcm.clone(), rcm.e_rcm)
        };

        let blocks1 = build_level1(&j_rcm, e_target, &self.gains, q, &limits, self.dt)
            .expect("validated controller parameters");
        let sol1 = self.solver1.solve(&blocks1.to_problem(), &self.qp_settings, self.warm1.as_ref());
        self.warm1 = Some(sol1.x.clone());

        if sol1.status != QpStatus::Solved {
            // Highest level failed: freeze the arm for this cycle.
            let result = HqpResult {
                qdot1: DVector::zeros(n),
                qdot2: DVector::zeros(n),
                qdot_sol: DVector::zeros(n),
                slack1_norm: 0.0,
                slack2_norm: 0.0,
                n1: DMatrix::identity(n, n),
                level1_time: sol1.solve_time,
                level2_time: 0.0,
                level1_status: sol1.status.into(),
                level2_status: LevelStatus::Skipped,
                level1_iterations: sol1.iterations,
                level2_iterations: 0,
                j_rcm,
            };
            return Ok(self.finish(result, rcm, pixel, reference, depth));
        }

        let qdot1 = sol1.x.rows(0, n).into_owned();
        let slack1_norm = sol1.x.rows(n, 2 * n).norm();
        let n1 = null_space_projector(&j_rcm, self.gains.svd_tolerance);

        let j_vis = visual_jacobian_at(chain, q, intrinsics, pixel, depth)?;
        let e_vis = Vector2::new(pixel.u - reference.u, pixel.v - reference.v);
        let blocks2 =
            build_level2(&j_vis, &e_vis, &self.gains, &qdot1, &n1, q, &limits, self.dt)
                .expect("validated controller parameters");
        let sol2 = self.solver2.solve(&blocks2.to_problem(), &self.qp_settings, self.warm2.as_ref());
        self.warm2 = Some(sol2.x.clone());

        let result = if sol2.status == QpStatus::Solved {
            let qdot2 = sol2.x.rows(0, n).into_owned();
            let qdot_sol = &n1 * &qdot2 + &qdot1;
            HqpResult {
                slack2_norm: sol2.x.rows(n, 2 * n).norm(),
                qdot1,
                qdot2,
                qdot_sol,
                slack1_norm,
                n1,
                level1_time: sol1.solve_time,
                level2_time: sol2.solve_time,
                level1_status: LevelStatus::Solved,
                level2_status: LevelStatus::Solved,
                level1_iterations: sol1.iterations,
                level2_iterations: sol2.iterations,
                j_rcm,
            }
        } else {
            // Secondary task failed: keep the RCM-only motion.
            HqpResult {
                qdot_sol: qdot1.clone(),
                qdot2: DVector::zeros(n),
                qdot1,
                slack1_norm,
                slack2_norm: 0.0,
                n1,
                level1_time: sol1.solve_time,
                level2_time: sol2.solve_time,
                level1_status: LevelStatus::Solved,
                level2_status: sol2.status.into(),
                level1_iterations: sol1.iterations,
                level2_iterations: sol2.iterations,
                j_rcm,
            }
        };
        Ok(self.finish(result, rcm, pixel, reference, depth))
    }

    fn finish(
        &self,
        result: HqpResult,
        rcm: RcmState,
        pixel: &ImagePoint,
        reference: &ImagePoint,
        depth: f64,
    ) -> ControlStep {
        ControlStep {
            result,
            rcm,
            pixel: *pixel,
            e_vis: Vector2::new(pixel.u - reference.u, pixel.v - reference.v),
            depth,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::{brute_force_reference, solve_qp};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn gains() -> HqpGains {
        HqpGains::defaults_for_dt(0.002)
    }

    fn limits(n: usize) -> JointLimits {
        JointLimits { lower: DVector::from_element(n, -2.5), upper: DVector::from_element(n, 2.5) }
    }

    fn random_row(n: usize, rng: &mut ChaCha8Rng) -> RowDVector<f64> {
        RowDVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn baseline_identity_and_zero() {
        let xdot = DVector::from_column_slice(&[0.3, -0.1]);
        let qdot = baseline_pinv_step(&DMatrix::identity(2, 2), &xdot, 1e-8);
        assert_relative_eq!(qdot, xdot, epsilon = 1e-12);

        let qdot = baseline_pinv_step(&DMatrix::zeros(2, 3), &xdot, 1e-8);
        assert_eq!(qdot.amax(), 0.0);
    }

    #[test]
    fn baseline_wide_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(211);
        for _ in 0..20 {
            let j = DMatrix::from_fn(2, 5, |_, _| rng.random_range(-1.0..1.0));
            let xdot = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let qdot = baseline_pinv_step(&j, &xdot, 1e-8);
            assert_relative_eq!(&j * &qdot, xdot, epsilon = 1e-10);
            // Minimum norm: qdot lies in the row space of J, so projecting
            // onto it changes nothing.
            let jjt_inv = (&j * j.transpose()).try_inverse().unwrap();
            let projected = j.transpose() * jjt_inv * &j * &qdot;
            assert!((&qdot - projected).amax() < 1e-10);
        }
    }

    #[test]
    fn level1_structure_n2() {
        let j = RowDVector::from_column_slice(&[0.4, -0.2]);
        let q = DVector::from_column_slice(&[0.1, -0.3]);
        let blocks = build_level1(&j, 0.01, &gains(), &q, &limits(2), 0.002).unwrap();
        assert_eq!(blocks.a_bar.shape(), (5, 6));
        assert_eq!(blocks.q.shape(), (6, 6));
        assert_eq!(blocks.p.len(), 6);
        assert_eq!(blocks.c.shape(), (4, 2));
        assert_eq!(blocks.g.shape(), (4, 6));

        // Q1 is block-diagonal [J^T J, I_4] and reconstructible bit for bit.
        assert_eq!(blocks.q, blocks.a_bar.transpose() * &blocks.a_bar);
        assert_eq!(blocks.p, -(blocks.a_bar.transpose() * &blocks.b_bar));
        let jtj = j.transpose() * &j;
        assert_eq!(blocks.q.view((0, 0), (2, 2)), jtj.view((0, 0), (2, 2)));
        assert_eq!(
            blocks.q.view((2, 2), (4, 4)).clone_owned(),
            DMatrix::identity(4, 4)
        );

        // C = [I; -I] exactly.
        let mut c_expected = DMatrix::zeros(4, 2);
        c_expected.view_mut((0, 0), (2, 2)).copy_from(&DMatrix::identity(2, 2));
        c_expected.view_mut((2, 0), (2, 2)).copy_from(&(-DMatrix::<f64>::identity(2, 2)));
        assert_eq!(blocks.c, c_expected);
    }

    #[test]
    fn level1_zero_error_gives_zero_gradient() {
        let j = RowDVector::from_column_slice(&[0.4, -0.2]);
        let q = DVector::zeros(2);
        let blocks = build_level1(&j, 0.0, &gains(), &q, &limits(2), 0.002).unwrap();
        assert_eq!(blocks.p.amax(), 0.0);
        let sol = solve_qp(&blocks.to_problem(), &QpSettings::default(), None);
        assert_eq!(sol.status, QpStatus::Solved);
        assert!(sol.x.amax() < 1e-9);
    }

    #[test]
    fn level1_upper_limit_blocks_positive_velocity() {
        let j = RowDVector::from_column_slice(&[1.0, 0.0]);
        let lims = limits(2);
        let mut q = DVector::zeros(2);
        q[0] = lims.upper[0];
        let blocks = build_level1(&j, 0.05, &gains(), &q, &lims, 0.002).unwrap();
        // Upper-bound row of the saturated joint is exactly zero.
        assert_eq!(blocks.d[0], 0.0);
        assert!(blocks.d[1] > 0.0);
    }

    #[test]
    fn projector_axis_row() {
        let j = RowDVector::from_column_slice(&[1.0, 0.0, 0.0]);
        let n1 = null_space_projector(&j, 1e-8);
        let mut expected = DMatrix::identity(3, 3);
        expected[(0, 0)] = 0.0;
        assert_relative_eq!(n1, expected, epsilon = 1e-15);
    }

    #[test]
    fn projector_zero_row_is_identity() {
        let j = RowDVector::zeros(4);
        assert_eq!(null_space_projector(&j, 1e-8), DMatrix::identity(4, 4));
    }

    #[test]
    fn projector_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(223);
        for _ in 0..100 {
            let j = random_row(6, &mut rng);
            let n1 = null_space_projector(&j, 1e-8);
            assert!((&n1 * &n1 - &n1).amax() < 1e-12);
            assert!((&n1 - n1.transpose()).amax() < 1e-12);
            assert!((&j * &n1).amax() < 1e-12);
        }
    }

    #[test]
    fn level2_structure_n6() {
        let mut rng = ChaCha8Rng::seed_from_u64(227);
        let j_rcm = random_row(6, &mut rng);
        let n1 = null_space_projector(&j_rcm, 1e-8);
        let j_vis = Matrix2xX::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let blocks = build_level2(
            &j_vis,
            &Vector2::new(3.0, -4.0),
            &gains(),
            &DVector::zeros(6),
            &n1,
            &DVector::zeros(6),
            &limits(6),
            0.002,
        )
        .unwrap();
        assert_eq!(blocks.a_bar.shape(), (14, 18));
        assert_eq!(blocks.q.shape(), (18, 18));
        assert_eq!(blocks.p.len(), 18);
        assert_eq!(blocks.q, blocks.a_bar.transpose() * &blocks.a_bar);
        assert_eq!(blocks.p, -(blocks.a_bar.transpose() * &blocks.b_bar));
    }

    #[test]
    fn level2_bounds_shifted_by_level1_velocity() {
        // Constraints act on the composed velocity N1 qdot + qdot1, so the
        // right-hand side carries the level-1 solution.
        let mut rng = ChaCha8Rng::seed_from_u64(239);
        let j_rcm = random_row(3, &mut rng);
        let n1 = null_space_projector(&j_rcm, 1e-8);
        let j_vis = Matrix2xX::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let qdot1 = DVector::from_column_slice(&[0.4, -0.7, 0.1]);
        let q = DVector::from_column_slice(&[0.2, -0.1, 0.0]);
        let lims = limits(3);
        let dt = 0.002;
        let blocks = build_level2(
            &j_vis,
            &Vector2::new(1.0, -2.0),
            &gains(),
            &qdot1,
            &n1,
            &q,
            &lims,
            dt,
        )
        .unwrap();
        for i in 0..3 {
            assert_eq!(blocks.d[i], (lims.upper[i] - q[i]) / dt - qdot1[i]);
            assert_eq!(blocks.d[3 + i], -(lims.lower[i] - q[i]) / dt + qdot1[i]);
        }
        // The qdot block of the constraint matrix is the projector itself.
        assert_eq!(blocks.c.view((0, 0), (3, 3)).clone_owned(), n1);
        assert_eq!(blocks.c.view((3, 0), (3, 3)).clone_owned(), -&n1);
    }

    #[test]
    fn level2_zero_error_zero_drive_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(229);
        let j_rcm = random_row(6, &mut rng);
        let n1 = null_space_projector(&j_rcm, 1e-8);
        let j_vis = Matrix2xX::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let blocks = build_level2(
            &j_vis,
            &Vector2::zeros(),
            &gains(),
            &DVector::zeros(6),
            &n1,
            &DVector::zeros(6),
            &limits(6),
            0.002,
        )
        .unwrap();
        let sol = solve_qp(&blocks.to_problem(), &QpSettings::default(), None);
        assert_eq!(sol.status, QpStatus::Solved);
        assert!(sol.x.amax() < 1e-9);
    }

    #[test]
    fn level2_annihilated_by_zero_projector() {
        // 1-DOF robot: the RCM task consumes the only degree of freedom.
        let j_rcm = RowDVector::from_column_slice(&[0.7]);
        let n1 = null_space_projector(&j_rcm, 1e-8);
        assert_eq!(n1.amax(), 0.0);
        let j_vis = Matrix2xX::from_column_slice(&[0.5, -0.3]);
        let qdot1 = DVector::from_column_slice(&[0.2]);
        let blocks = build_level2(
            &j_vis,
            &Vector2::new(5.0, 1.0),
            &gains(),
            &qdot1,
            &n1,
            &DVector::zeros(1),
            &JointLimits {
                lower: DVector::from_element(1, -2.5),
                upper: DVector::from_element(1, 2.5),
            },
            0.002,
        )
        .unwrap();
        let sol = solve_qp(&blocks.to_problem(), &QpSettings::default(), None);
        assert_eq!(sol.status, QpStatus::Solved);
        let qdot2 = sol.x.rows(0, 1).into_owned();
        let qdot_sol = &n1 * &qdot2 + &qdot1;
        assert_relative_eq!(qdot_sol, qdot1, epsilon = 1e-12);
    }

    fn controller_setup() -> (KinematicChain, DVector<f64>, TrocarConfig, Marker, CameraIntrinsics)
    {
        let chain = KinematicChain::default_6r();
        let q = DVector::from_column_slice(&[0.0, 0.5, -1.1, 0.0, -0.9, 0.0]);
        let p_pre = chain.forward_kinematics(&q, chain.pre_rcm_frame()).unwrap().translation.vector;
        let p_tip =
            chain.forward_kinematics(&q, chain.shaft_tip_frame()).unwrap().translation.vector;
        let axis = (p_tip - p_pre).normalize();
        let trocar = TrocarConfig::new(p_pre + axis * 0.2 + Vector3::new(2e-4, -1e-4, 1.5e-4));
        let cam = chain.forward_kinematics(&q, chain.camera_frame()).unwrap();
        let marker = Marker {
            id: 0,
            p_world: cam.transform_vector(&Vector3::new(0.004, -0.006, 0.35))
                + cam.translation.vector,
        };
        (chain, q, trocar, marker, CameraIntrinsics::default())
    }

    #[test]
    fn strict_priority_on_solved_steps() {
        let (chain, q, trocar, marker, intr) = controller_setup();
        let mut ctrl = HqpController::new(gains(), QpSettings::default(), 0.002).unwrap();
        let step = ctrl.solve_step(&chain, &q, &trocar, &marker, &intr).unwrap();
        assert_eq!(step.result.level1_status, LevelStatus::Solved);
        assert_eq!(step.result.level2_status, LevelStatus::Solved);
        assert!(step.result.priority_residual() <= 1e-9);
        // The RCM rate matches the commanded k * e when bounds are inactive.
        let rate = (&step.result.j_rcm * &step.result.qdot_sol)[0];
        assert_relative_eq!(rate, gains().k_rcm * step.rcm.e_rcm, epsilon = 1e-6);
    }

    #[test]
    fn slack_dormant_and_limits_respected() {
        let (chain, q, trocar, marker, intr) = controller_setup();
        let mut ctrl = HqpController::new(gains(), QpSettings::default(), 0.002).unwrap();
        let step = ctrl.solve_step(&chain, &q, &trocar, &marker, &intr).unwrap();
        assert!(step.result.slack1_norm <= 1e-8);
        assert!(step.result.slack2_norm <= 1e-8);
        let next_q = &q + &step.result.qdot_sol * 0.002;
        let lims = JointLimits::of_chain(&chain);
        for i in 0..chain.num_joints() {
            assert!(next_q[i] <= lims.upper[i] + 1e-9);
            assert!(next_q[i] >= lims.lower[i] - 1e-9);
        }
    }

    #[test]
    fn zero_errors_give_zero_velocity() {
        let (chain, q, _, _, intr) = controller_setup();
        // Trocar exactly on the shaft and marker exactly on the optical axis.
        let p_pre = chain.forward_kinematics(&q, chain.pre_rcm_frame()).unwrap().translation.vector;
        let p_tip =
            chain.forward_kinematics(&q, chain.shaft_tip_frame()).unwrap().translation.vector;
        let axis = (p_tip - p_pre).normalize();
        let trocar = TrocarConfig::new(p_pre + axis * 0.2);
        let cam = chain.forward_kinematics(&q, chain.camera_frame()).unwrap();
        let marker = Marker {
            id: 0,
            p_world: cam.transform_vector(&Vector3::new(0.0, 0.0, 0.3)) + cam.translation.vector,
        };
        let mut ctrl = HqpController::new(gains(), QpSettings::default(), 0.002).unwrap();
        let step = ctrl.solve_step(&chain, &q, &trocar, &marker, &intr).unwrap();
        assert!(step.result.qdot_sol.amax() < 1e-9);
    }

    #[test]
    fn matches_brute_force_hierarchy() {
        // Re-solve both levels with the enumeration oracle and compare the
        // composed velocity.
        let (chain, q0, trocar, marker, intr) = controller_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(233);
        let st = QpSettings::default();
        let g = gains();
        // Perturbations stay in the controller's operating envelope
        // (sub-millimeter RCM error), as in a 500 Hz loop.
        for _ in 0..10 {
            let q = &q0
                + DVector::from_fn(chain.num_joints(), |_, _| rng.random_range(-1e-3..1e-3));
            let mut ctrl = HqpController::new(g, st, 0.002).unwrap();
            let step = ctrl.solve_step(&chain, &q, &trocar, &marker, &intr).unwrap();
            assert_eq!(step.result.level1_status, LevelStatus::Solved);
            assert_eq!(step.result.level2_status, LevelStatus::Solved);

            let lims = JointLimits::of_chain(&chain);
            let blocks1 =
                build_level1(&step.result.j_rcm, step.rcm.e_rcm, &g, &q, &lims, 0.002).unwrap();
            let n = chain.num_joints();
            let sol1 = brute_force_reference(&blocks1.to_problem(), &st)
                .expect("oracle solved level 1");
            let qdot1 = sol1.0.rows(0, n).into_owned();
            assert_relative_eq!(qdot1, step.result.qdot1, epsilon = 1e-6);

            let n1 = null_space_projector(&step.result.j_rcm, g.svd_tolerance);
            let j_vis = visual_jacobian_at(&chain, &q, &intr, &step.pixel, step.depth).unwrap();
            let blocks2 =
                build_level2(&j_vis, &step.e_vis, &g, &qdot1, &n1, &q, &lims, 0.002).unwrap();
            let sol2 = brute_force_reference(&blocks2.to_problem(), &st)
                .expect("oracle solved level 2");
            let qdot_sol = &n1 * sol2.0.rows(0, n) + &qdot1;
            assert_relative_eq!(qdot_sol, step.result.qdot_sol, epsilon = 1e-6);
        }
    }

    #[test]
    fn degenerate_rcm_uses_previous_direction() {
        let (chain, q, _, marker, intr) = controller_setup();
        let p_pre = chain.forward_kinematics(&q, chain.pre_rcm_frame()).unwrap().translation.vector;
        let p_tip =
            chain.forward_kinematics(&q, chain.shaft_tip_frame()).unwrap().translation.vector;
        let axis = (p_tip - p_pre).normalize();
        let on_shaft = TrocarConfig::new(p_pre + axis * 0.2);

        let mut ctrl = HqpController::new(gains(), QpSettings::default(), 0.002).unwrap();
        // Cold start on a degenerate state: zero row, zero target.
        let step = ctrl.solve_step(&chain, &q, &on_shaft, &marker, &intr).unwrap();
        assert!(step.rcm.degenerate);
        assert_eq!(step.result.j_rcm.amax(), 0.0);

        // After one non-degenerate cycle the direction is remembered.
        let off_shaft = TrocarConfig::new(p_pre + axis * 0.2 + Vector3::new(1e-3, 0.0, 0.0));
        ctrl.solve_step(&chain, &q, &off_shaft, &marker, &intr).unwrap();
        let step = ctrl.solve_step(&chain, &q, &on_shaft, &marker, &intr).unwrap();
        assert!(step.rcm.degenerate);
        assert!(step.result.j_rcm.amax() > 0.0);
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(HqpController::new(gains(), QpSettings::default(), 0.0).is_err());
        let mut g = gains();
        g.k_vis = -1.0;
        assert!(HqpController::new(g, QpSettings::default(), 0.002).is_err());
    }
}
