//! Command implementations behind the `rcmvs` binary: run a scenario and
//! write machine-readable logs, audit the analytical Jacobians against finite
//! differences, and benchmark the per-cycle solve time.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use rcmvs_core::config::{load_scenario, ScenarioLoadError};
use rcmvs_core::hqp::null_space_projector;
use rcmvs_core::kinematics::{JointVector, KinematicChain};
use rcmvs_core::rcm::{compute_rcm_state, TrocarConfig};
use rcmvs_core::sim::{run_scenario, SimResult, StepRecord};
use rcmvs_core::visual::{project, visual_jacobian, CameraIntrinsics, Marker};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SCENARIO_FAILED: i32 = 1;
pub const EXIT_CONFIG_ERROR: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        EXIT_CONFIG_ERROR
    }
}

impl From<ScenarioLoadError> for CliError {
    fn from(err: ScenarioLoadError) -> Self {
        CliError::Config(err.to_string())
    }
}

/// Output of a `run` invocation.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub log_path: PathBuf,
    pub summary_path: PathBuf,
    /// 0 when the scenario completed, 1 when it failed or aborted.
    pub exit_code: i32,
    pub result: SimResult,
}

#[derive(Debug, Serialize)]
struct SummaryJson {
    max_e_rcm_mm: f64,
    mean_e_rcm_mm: f64,
    mean_solve_us: f64,
    max_solve_us: f64,
    targets: Vec<TargetJson>,
    completed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    aborted: Option<String>,
}

#[derive(Debug, Serialize)]
struct TargetJson {
    id: u32,
    t_converged_s: Option<f64>,
}

/// Runs a scenario file and writes `log.csv` and `summary.json` into
/// `out_dir`.
pub fn cmd_run(scenario_path: &Path, out_dir: &Path) -> Result<RunArtifacts, CliError> {
    let scenario = load_scenario(scenario_path)?;
    let result = run_scenario(&scenario).map_err(|e| CliError::Config(e.to_string()))?;

    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("log.csv");
    let summary_path = out_dir.join("summary.json");

    std::fs::write(&log_path, render_csv(&result.records, scenario.chain.num_joints()))?;
    let summary = SummaryJson {
        max_e_rcm_mm: result.summary.max_e_rcm_mm,
        mean_e_rcm_mm: result.summary.mean_e_rcm_mm,
        mean_solve_us: result.summary.mean_solve_us,
        max_solve_us: result.summary.max_solve_us,
        targets: result
            .summary
            .targets
            .iter()
            .map(|t| TargetJson { id: t.id, t_converged_s: t.t_converged_s })
            .collect(),
        completed: result.summary.completed,
        aborted: result.aborted.clone(),
    };
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    std::fs::write(&summary_path, text)?;

    let exit_code = if result.summary.completed && result.aborted.is_none() {
        EXIT_OK
    } else {
        EXIT_SCENARIO_FAILED
    };
    Ok(RunArtifacts { log_path, summary_path, exit_code, result })
}

/// Renders the per-cycle log. Column layout is fixed:
/// `t,q0..q{n-1},qd0..qd{n-1},e_rcm_mm,e_vis_u,e_vis_v,e_vis_px,target_id,solve_us,slack1,slack2,status1,status2`.
pub fn render_csv(records: &[StepRecord], num_joints: usize) -> String {
    let mut out = String::new();
    out.push('t');
    for i in 0..num_joints {
        let _ = write!(out, ",q{i}");
    }
    for i in 0..num_joints {
        let _ = write!(out, ",qd{i}");
    }
    out.push_str(",e_rcm_mm,e_vis_u,e_vis_v,e_vis_px,target_id,solve_us,slack1,slack2,status1,status2\n");
    for r in records {
        let _ = write!(out, "{}", r.t);
        for v in r.q.iter() {
            let _ = write!(out, ",{v}");
        }
        for v in r.qdot.iter() {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(
            out,
            ",{},{},{},{},{},{},{},{},{},{}",
            r.e_rcm_mm,
            r.e_vis_u,
            r.e_vis_v,
            r.e_vis_px,
            r.target_id,
            r.solve_us,
            r.slack1,
            r.slack2,
            r.status1.as_str(),
            r.status2.as_str()
        );
    }
    out
}

/// Worst relative errors of the finite-difference audits.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub samples: usize,
    pub worst_position_jacobian: f64,
    pub worst_rcm_jacobian: f64,
    pub worst_visual_jacobian: f64,
    pub worst_projector_identity: f64,
}

pub const POSITION_JACOBIAN_TOL: f64 = 1e-5;
pub const RCM_JACOBIAN_TOL: f64 = 1e-4;
pub const VISUAL_JACOBIAN_TOL: f64 = 1e-4;
pub const PROJECTOR_TOL: f64 = 1e-12;

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst_position_jacobian < POSITION_JACOBIAN_TOL
            && self.worst_rcm_jacobian < RCM_JACOBIAN_TOL
            && self.worst_visual_jacobian < VISUAL_JACOBIAN_TOL
            && self.worst_projector_identity < PROJECTOR_TOL
    }

    pub fn render(&self) -> String {
        format!(
            "jacobian audit over {} random configurations\n\
             position jacobian  worst rel err {:.3e}  (tol {:.0e})\n\
             rcm jacobian       worst rel err {:.3e}  (tol {:.0e})\n\
             visual jacobian    worst rel err {:.3e}  (tol {:.0e})\n\
             projector algebra  worst residual {:.3e}  (tol {:.0e})\n\
             result: {}\n",
            self.samples,
            self.worst_position_jacobian,
            POSITION_JACOBIAN_TOL,
            self.worst_rcm_jacobian,
            RCM_JACOBIAN_TOL,
            self.worst_visual_jacobian,
            VISUAL_JACOBIAN_TOL,
            self.worst_projector_identity,
            PROJECTOR_TOL,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Negative-control hook for tests: deliberately corrupt one quantity and
/// verify the audit notices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CheckCorruption {
    #[default]
    None,
    FlipRcmJacobianSign,
}

/// Audits the analytical Jacobians of the default chain against finite
/// differences on `samples` random configurations.
pub fn cmd_check(samples: usize, seed: u64) -> Result<CheckReport, CliError> {
    if samples == 0 {
        return Err(CliError::Usage("check needs at least one sample".into()));
    }
    Ok(run_check(samples, seed, CheckCorruption::None))
}

pub fn run_check(samples: usize, seed: u64, corruption: CheckCorruption) -> CheckReport {
    let chain = KinematicChain::default_6r();
    let intrinsics = CameraIntrinsics::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = chain.num_joints();

    let mut report = CheckReport {
        samples,
        worst_position_jacobian: 0.0,
        worst_rcm_jacobian: 0.0,
        worst_visual_jacobian: 0.0,
        worst_projector_identity: 0.0,
    };

    for _ in 0..samples {
        let q: JointVector = DVector::from_iterator(
            n,
            chain.joints().iter().map(|j| rng.random_range(0.7 * j.q_min..0.7 * j.q_max)),
        );

        // Position Jacobian vs central differences, all named frames.
        for frame in [n / 2, n, chain.shaft_tip_frame(), chain.camera_frame()] {
            let analytic = chain.position_jacobian(&q, frame).unwrap();
            let numeric = chain.numeric_jacobian(&q, frame, 1e-6).unwrap();
            let err = (&analytic - &numeric).amax() / analytic.amax().max(1.0);
            report.worst_position_jacobian = report.worst_position_jacobian.max(err);
        }

        // RCM task row vs finite differences of the projected-point motion.
        let p_pre = chain.forward_kinematics(&q, chain.pre_rcm_frame()).unwrap().translation.vector;
        let p_tip =
            chain.forward_kinematics(&q, chain.shaft_tip_frame()).unwrap().translation.vector;
        let axis = (p_tip - p_pre).normalize();
        let lateral = Vector3::new(
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
        );
        let lateral = lateral - axis * lateral.dot(&axis);
        let t_shaft = rng.random_range(0.05..0.9) * (p_tip - p_pre).norm();
        let trocar = TrocarConfig::new(p_pre + axis * t_shaft + lateral);
        let state = compute_rcm_state(&chain, &q, &trocar).unwrap();
        if !state.degenerate {
            let mut j_rcm = state.j_rcm.clone();
            if corruption == CheckCorruption::FlipRcmJacobianSign {
                j_rcm = -j_rcm;
            }
            let qdot = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let delta = 1e-6;
            let phi = |qq: &JointVector| {
                let s = compute_rcm_state(&chain, qq, &trocar).unwrap();
                state.p_e_hat.dot(&s.p_rcm)
            };
            let fd = (phi(&(&q + &qdot * delta)) - phi(&(&q - &qdot * delta))) / (2.0 * delta);
            let analytic = (&j_rcm * &qdot)[0];
            let err = (fd - analytic).abs() / analytic.abs().max(1.0);
            report.worst_rcm_jacobian = report.worst_rcm_jacobian.max(err);

            // Projector identities on the genuine row.
            let n1 = null_space_projector(&state.j_rcm, 1e-8);
            let idem = (&n1 * &n1 - &n1).amax();
            let sym = (&n1 - n1.transpose()).amax();
            let annihilation = (&state.j_rcm * &n1).amax();
            report.worst_projector_identity =
                report.worst_projector_identity.max(idem).max(sym).max(annihilation);
        }

        // Visual Jacobian vs finite-difference pixel motion.
        let cam = chain.forward_kinematics(&q, chain.camera_frame()).unwrap();
        let offset = Vector3::new(
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
            rng.random_range(0.1..0.4),
        );
        let marker =
            Marker { id: 0, p_world: cam.transform_vector(&offset) + cam.translation.vector };
        let (j_vis, _, _) = visual_jacobian(&chain, &q, &intrinsics, &marker).unwrap();
        let qdot = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let delta = 1e-6;
        let pixel_at = |qq: &JointVector| {
            let pose = chain.forward_kinematics(qq, chain.camera_frame()).unwrap();
            project(&pose, &intrinsics, &marker).unwrap().0
        };
        let plus = pixel_at(&(&q + &qdot * delta));
        let minus = pixel_at(&(&q - &qdot * delta));
        let fd = nalgebra::Vector2::new(
            (plus.u - minus.u) / (2.0 * delta),
            (plus.v - minus.v) / (2.0 * delta),
        );
        let analytic = &j_vis * &qdot;
        let err = (fd - analytic).amax() / analytic.amax().max(1.0);
        report.worst_visual_jacobian = report.worst_visual_jacobian.max(err);
    }
    report
}

/// Per-cycle combined solve-time statistics over a fresh run of the scenario.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub cycles: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub p99_us: f64,
}

impl BenchReport {
    pub fn render(&self) -> String {
        format!(
            "hqp solve time over {} cycles (both levels combined)\n\
             mean   {:8.1} us\n\
             median {:8.1} us\n\
             p99    {:8.1} us\n",
            self.cycles, self.mean_us, self.median_us, self.p99_us
        )
    }
}

/// Runs the controller for `cycles` steps of the scenario and reports timing
/// statistics. Timings are wall clock and vary run to run.
pub fn cmd_bench(cycles: usize, scenario_path: &Path) -> Result<BenchReport, CliError> {
    if cycles < 100 {
        return Err(CliError::Usage("bench needs at least 100 cycles".into()));
    }
    let mut scenario = load_scenario(scenario_path)?;
    scenario.max_duration = cycles as f64 * scenario.dt;
    let result = run_scenario(&scenario).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(reason) = &result.aborted {
        return Err(CliError::Config(format!("scenario aborted during bench: {reason}")));
    }

    let mut times: Vec<f64> = result.records.iter().map(|r| r.solve_us).collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let median = times[times.len() / 2];
    let p99 = times[((times.len() as f64 * 0.99) as usize).min(times.len() - 1)];
    Ok(BenchReport { cycles: times.len(), mean_us: mean, median_us: median, p99_us: p99 })
}
