//! Closed-loop kinematic simulation: integrate commanded joint velocities at
//! the control rate, project the active marker, sequence targets on pixel
//! error, and log per-cycle records.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::ConfigError;
use crate::hqp::{HqpController, HqpGains, LevelStatus};
use crate::kinematics::{JointVector, KinematicChain};
use crate::otg::{otg_step, OtgLimits, OtgState};
use crate::qp::QpSettings;
use crate::rcm::{compute_rcm_state, TrocarConfig};
use crate::visual::{project, CameraIntrinsics, ImagePoint, Marker};

/// Pixel-space trajectory smoothing configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtgConfig {
    pub enabled: bool,
    pub limits: OtgLimits,
}

impl Default for OtgConfig {
    fn default() -> Self {
        Self { enabled: true, limits: OtgLimits { v_max: 300.0, a_max: 1500.0 } }
    }
}

/// Complete configuration of one simulation run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub chain: KinematicChain,
    pub trocar: TrocarConfig,
    pub intrinsics: CameraIntrinsics,
    pub markers: Vec<Marker>,
    pub initial_q: JointVector,
    pub gains: HqpGains,
    pub qp: QpSettings,
    pub otg: OtgConfig,
    /// Pixel error below which the next target is selected.
    pub switch_threshold: f64,
    /// Consecutive sub-threshold cycles required before switching.
    pub settle_cycles: usize,
    /// Control period (s).
    pub dt: f64,
    /// Simulated duration (s).
    pub max_duration: f64,
    pub seed: u64,
    /// Amplitude of uniform pixel measurement noise; 0 disables it.
    pub pixel_noise: f64,
}

impl Scenario {
    /// Number of control cycles in a full run.
    pub fn cycles(&self) -> usize {
        ((self.max_duration / self.dt) + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.dt > 0.0) {
            return Err(ConfigError::new("dt must be positive"));
        }
        if !(self.max_duration > 0.0) {
            return Err(ConfigError::new("max_duration must be positive"));
        }
        if self.markers.is_empty() {
            return Err(ConfigError::new("scenario needs at least one marker"));
        }
        if self.settle_cycles == 0 {
            return Err(ConfigError::new("settle_cycles must be at least 1"));
        }
        if !(self.switch_threshold >= 0.0) {
            return Err(ConfigError::new("switch_threshold must be non-negative"));
        }
        if !(self.pixel_noise >= 0.0) {
            return Err(ConfigError::new("pixel_noise must be non-negative"));
        }
        self.intrinsics.validate()?;
        self.gains.validate()?;
        self.qp.validate()?;
        self.otg.limits.validate()?;

        let n = self.chain.num_joints();
        if self.initial_q.len() != n {
            return Err(ConfigError::new(format!(
                "initial_q has {} entries, chain has {n} joints",
                self.initial_q.len()
            )));
        }
        for (i, joint) in self.chain.joints().iter().enumerate() {
            if self.initial_q[i] < joint.q_min || self.initial_q[i] > joint.q_max {
                return Err(ConfigError::new(format!(
                    "initial_q[{i}] = {} outside joint limits [{}, {}]",
                    self.initial_q[i], joint.q_min, joint.q_max
                )));
            }
        }

        // The run must start with the shaft through the trocar (within 1 mm)
        // and the first marker in view.
        let rcm = compute_rcm_state(&self.chain, &self.initial_q, &self.trocar)
            .map_err(|e| ConfigError::new(format!("initial configuration: {e}")))?;
        if rcm.e_rcm > 1e-3 {
            return Err(ConfigError::new(format!(
                "initial RCM error {:.3} mm exceeds 1 mm; move the trocar onto the shaft",
                rcm.e_rcm * 1e3
            )));
        }
        let cam = self
            .chain
            .forward_kinematics(&self.initial_q, self.chain.camera_frame())
            .map_err(|e| ConfigError::new(format!("initial configuration: {e}")))?;
        let (pixel, _) = project(&cam, &self.intrinsics, &self.markers[0])
            .map_err(|e| ConfigError::new(format!("first marker: {e}")))?;
        if !self.pixel_in_image(&pixel) {
            return Err(ConfigError::new(format!(
                "first marker projects outside the image at ({:.1}, {:.1})",
                pixel.u, pixel.v
            )));
        }
        Ok(())
    }

    fn pixel_in_image(&self, pixel: &ImagePoint) -> bool {
        pixel.u >= 0.0
            && pixel.u <= self.intrinsics.width
            && pixel.v >= 0.0
            && pixel.v <= self.intrinsics.height
    }
}

/// One log row per control cycle.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: f64,
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub e_rcm_mm: f64,
    pub e_vis_u: f64,
    pub e_vis_v: f64,
    pub e_vis_px: f64,
    pub target_id: u32,
    pub solve_us: f64,
    pub slack1: f64,
    pub slack2: f64,
    pub status1: LevelStatus,
    pub status2: LevelStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSummary {
    pub id: u32,
    pub t_converged_s: Option<f64>,
}

/// Aggregates recomputable from the records alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub max_e_rcm_mm: f64,
    pub mean_e_rcm_mm: f64,
    pub mean_solve_us: f64,
    pub max_solve_us: f64,
    pub targets: Vec<TargetSummary>,
    pub completed: bool,
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub records: Vec<StepRecord>,
    pub summary: Summary,
    /// Populated when the run stopped early on a geometry failure.
    pub aborted: Option<String>,
    /// Worst |j_rcm (qdot_sol - qdot1)| over all fully solved cycles.
    pub max_priority_residual: f64,
}

/// Tracks which marker is active and counts consecutive sub-threshold cycles.
#[derive(Debug, Clone)]
pub struct TargetSequencer {
    active: usize,
    below: usize,
    count: usize,
}

impl TargetSequencer {
    pub fn new(count: usize) -> Self {
        assert!(count > 0);
        Self { active: 0, below: 0, count }
    }

    pub fn active(&self) -> usize {
        self.active
    }

    /// Feeds one cycle's pixel error norm. Returns true when the sequencer
    /// switched to the next target; the last target is held forever.
    pub fn advance(&mut self, e_vis_norm: f64, threshold: f64, settle_cycles: usize) -> bool {
        if e_vis_norm < threshold {
            self.below += 1;
        } else {
            self.below = 0;
        }
        if self.below >= settle_cycles && self.active + 1 < self.count {
            self.active += 1;
            self.below = 0;
            return true;
        }
        false
    }
}

/// Recomputes the summary from the log. `clean` is false when the run was
/// aborted.
pub fn summarize(
    records: &[StepRecord],
    marker_ids: &[u32],
    switch_threshold: f64,
    settle_cycles: usize,
    clean: bool,
) -> Summary {
    let mut targets: Vec<TargetSummary> =
        marker_ids.iter().map(|&id| TargetSummary { id, t_converged_s: None }).collect();

    let mut run = 0usize;
    for record in records {
        let slot = targets.iter_mut().find(|t| t.id == record.target_id);
        let converging = record.e_vis_px < switch_threshold;
        run = if converging { run + 1 } else { 0 };
        if run >= settle_cycles {
            if let Some(slot) = slot {
                if slot.t_converged_s.is_none() {
                    slot.t_converged_s = Some(record.t);
                }
            }
            run = 0;
        }
    }

    let count = records.len() as f64;
    let max_e_rcm_mm = records.iter().map(|r| r.e_rcm_mm).fold(0.0, f64::max);
    let mean_e_rcm_mm =
        if records.is_empty() { 0.0 } else { records.iter().map(|r| r.e_rcm_mm).sum::<f64>() / count };
    let max_solve_us = records.iter().map(|r| r.solve_us).fold(0.0, f64::max);
    let mean_solve_us =
        if records.is_empty() { 0.0 } else { records.iter().map(|r| r.solve_us).sum::<f64>() / count };

    let all_converged = targets.iter().all(|t| t.t_converged_s.is_some());
    let final_below = records.last().is_some_and(|r| r.e_vis_px < switch_threshold);
    Summary {
        max_e_rcm_mm,
        mean_e_rcm_mm,
        mean_solve_us,
        max_solve_us,
        targets,
        completed: clean && all_converged && final_below,
    }
}

/// Runs the closed loop for the full configured duration.
pub fn run_scenario(scenario: &Scenario) -> Result<SimResult, ConfigError> {
    scenario.validate()?;
    let chain = &scenario.chain;
    let intr = &scenario.intrinsics;
    let mut controller = HqpController::new(scenario.gains, scenario.qp, scenario.dt)?;
    let mut q = scenario.initial_q.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut sequencer = TargetSequencer::new(scenario.markers.len());
    let mut otg_state: Option<OtgState> = None;
    let center = [intr.c_u, intr.c_v];

    let mut records = Vec::with_capacity(scenario.cycles());
    let mut aborted = None;
    let mut max_priority_residual: f64 = 0.0;

    for cycle in 0..scenario.cycles() {
        let t = cycle as f64 * scenario.dt;
        let marker: &Marker = &scenario.markers[sequencer.active()];

        let rcm = match compute_rcm_state(chain, &q, &scenario.trocar) {
            Ok(state) => state,
            Err(e) => {
                aborted = Some(format!("t={t:.4} s: {e}"));
                break;
            }
        };
        let cam = match chain.forward_kinematics(&q, chain.camera_frame()) {
            Ok(pose) => pose,
            Err(e) => {
                aborted = Some(format!("t={t:.4} s: {e}"));
                break;
            }
        };
        let (pixel_true, depth) = match project(&cam, intr, marker) {
            Ok(projection) => projection,
            Err(e) => {
                aborted = Some(format!("t={t:.4} s: target {}: {e}", marker.id));
                break;
            }
        };
        let pixel = if scenario.pixel_noise > 0.0 {
            let amplitude = scenario.pixel_noise;
            ImagePoint {
                u: pixel_true.u + rng.random_range(-amplitude..=amplitude),
                v: pixel_true.v + rng.random_range(-amplitude..=amplitude),
            }
        } else {
            pixel_true
        };
        if !scenario.pixel_in_image(&pixel) {
            aborted = Some(format!(
                "t={t:.4} s: target {} left the image at ({:.1}, {:.1})",
                marker.id, pixel.u, pixel.v
            ));
            break;
        }

        // Pixel-space reference: smoothed from the marker's position toward
        // the image center, or the center itself when smoothing is off.
        let reference = if scenario.otg.enabled {
            let state = otg_state
                .take()
                .unwrap_or_else(|| OtgState::at_rest(vec![pixel.u, pixel.v]));
            let next = otg_step(&state, &center, &scenario.otg.limits, scenario.dt);
            let reference = ImagePoint { u: next.pos[0], v: next.pos[1] };
            otg_state = Some(next);
            reference
        } else {
            intr.principal_point()
        };

        let step = match controller
            .solve_step_with_measurement(chain, &q, rcm, intr, &pixel, depth, &reference)
        {
            Ok(step) => step,
            Err(e) => {
                aborted = Some(format!("t={t:.4} s: {e}"));
                break;
            }
        };
        let result = &step.result;
        if result.level1_status == LevelStatus::Solved
            && result.level2_status == LevelStatus::Solved
        {
            max_priority_residual = max_priority_residual.max(result.priority_residual());
        }

        let e_vis_u = pixel.u - intr.c_u;
        let e_vis_v = pixel.v - intr.c_v;
        let e_vis_px = (e_vis_u * e_vis_u + e_vis_v * e_vis_v).sqrt();
        records.push(StepRecord {
            t,
            q: q.clone(),
            qdot: result.qdot_sol.clone(),
            e_rcm_mm: step.rcm.e_rcm * 1e3,
            e_vis_u,
            e_vis_v,
            e_vis_px,
            target_id: marker.id,
            solve_us: (result.level1_time + result.level2_time) * 1e6,
            slack1: result.slack1_norm,
            slack2: result.slack2_norm,
            status1: result.level1_status,
            status2: result.level2_status,
        });

        q += &result.qdot_sol * scenario.dt;

        if sequencer.advance(e_vis_px, scenario.switch_threshold, scenario.settle_cycles) {
            // Restart the reference from the new target's current position.
            otg_state = None;
        }
    }

    let marker_ids: Vec<u32> = scenario.markers.iter().map(|m| m.id).collect();
    let summary = summarize(
        &records,
        &marker_ids,
        scenario.switch_threshold,
        scenario.settle_cycles,
        aborted.is_none(),
    );
    Ok(SimResult { records, summary, aborted, max_priority_residual })
}
