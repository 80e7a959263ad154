//! Online trajectory generator: per-axis trapezoidal-velocity stepping toward
//! a target with hard velocity and acceleration bounds. Axes advance
//! independently; there is no cross-axis time synchronization.

use crate::error::ConfigError;

/// Per-axis velocity and acceleration bounds (the same bounds apply to every
/// axis).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtgLimits {
    pub v_max: f64,
    pub a_max: f64,
}

impl OtgLimits {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.v_max > 0.0 && self.a_max > 0.0) {
            return Err(ConfigError::new("OTG limits must be positive"));
        }
        Ok(())
    }
}

/// Position and velocity of the generated reference, one entry per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct OtgState {
    pub pos: Vec<f64>,
    pub vel: Vec<f64>,
}

impl OtgState {
    pub fn at_rest(pos: Vec<f64>) -> Self {
        let vel = vec![0.0; pos.len()];
        Self { pos, vel }
    }
}

/// Advances the reference one control period toward `target`.
///
/// Per axis the velocity moves toward the largest magnitude that can still
/// brake to a stop at the target under `a_max` steps (capped at `v_max`),
/// changing by at most `a_max * dt`; the position then integrates the new
/// velocity. Overshoot is bounded by a single step's travel.
pub fn otg_step(state: &OtgState, target: &[f64], limits: &OtgLimits, dt: f64) -> OtgState {
    assert!(dt > 0.0, "OTG step requires a positive period");
    assert_eq!(state.pos.len(), target.len(), "target dimension mismatch");
    let mut next = state.clone();
    for (axis, &goal) in target.iter().enumerate() {
        let (pos, vel) = step_axis(state.pos[axis], state.vel[axis], goal, limits, dt);
        next.pos[axis] = pos;
        next.vel[axis] = vel;
    }
    next
}

fn step_axis(pos: f64, vel: f64, target: f64, limits: &OtgLimits, dt: f64) -> (f64, f64) {
    let dist = target - pos;
    let dv_max = limits.a_max * dt;

    // Reach the target exactly in one step when both bounds allow it.
    let v_land = dist / dt;
    if v_land.abs() <= limits.v_max && (v_land - vel).abs() <= dv_max {
        return (target, v_land);
    }

    // Largest speed from which discrete deceleration steps of a_max*dt still
    // stop at the remaining distance: v (v + a dt) / (2 a) <= |dist|.
    let half_step = 0.5 * dv_max;
    let v_brake = -half_step + (half_step * half_step + 2.0 * limits.a_max * dist.abs()).sqrt();
    let v_des = dist.signum() * v_brake.min(limits.v_max);

    let new_vel = vel + (v_des - vel).clamp(-dv_max, dv_max);
    (pos + new_vel * dt, new_vel)
}
