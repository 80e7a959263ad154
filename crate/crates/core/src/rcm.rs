//! Remote-center-of-motion task: closest shaft point, scalar distance error,
//! error direction, and the 1×n task Jacobian.

use nalgebra::{Matrix3, Matrix3xX, RowDVector, Vector3};

use crate::error::GeometryError;
use crate::kinematics::{JointVector, KinematicChain};

/// Distance below which the shaft is considered to pass through the trocar
/// and the error direction becomes undefined.
pub const RCM_DEGENERATE_EPS: f64 = 1e-9;

/// Trocar insertion point, meters in the robot base frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrocarConfig {
    pub position: Vector3<f64>,
}

impl TrocarConfig {
    pub fn new(position: Vector3<f64>) -> Self {
        Self { position }
    }
}

/// Geometry of the RCM task at one configuration.
#[derive(Debug, Clone)]
pub struct RcmState {
    /// Position of the joint frame before the RCM (shaft start).
    pub p_pre: Vector3<f64>,
    /// Position of the shaft tip.
    pub p_tip: Vector3<f64>,
    /// Unit direction of the shaft, from `p_pre` toward `p_tip`.
    pub p_s_hat: Vector3<f64>,
    /// Vector from `p_pre` to the trocar.
    pub p_r: Vector3<f64>,
    /// Closest point on the shaft line to the trocar.
    pub p_rcm: Vector3<f64>,
    /// Distance between trocar and `p_rcm` (m, >= 0).
    pub e_rcm: f64,
    /// Unit direction from `p_rcm` toward the trocar; zero when degenerate.
    pub p_e_hat: Vector3<f64>,
    /// Signed distance of `p_rcm` from `p_pre` along the shaft (m).
    pub shaft_param: f64,
    /// True when `e_rcm` is below [`RCM_DEGENERATE_EPS`] and `p_e_hat` is
    /// undefined.
    pub degenerate: bool,
    /// RCM task Jacobian row (m per rad); zero when degenerate.
    pub j_rcm: RowDVector<f64>,
}

/// Computes the full RCM state at `q`, including the task Jacobian.
///
/// The closest point uses the unclamped line projection
/// `p_rcm = p_pre + (p_r . p_s_hat) p_s_hat`; a projection falling outside the
/// physical shaft segment is reported via a warning, not clamped.
pub fn compute_rcm_state(
    chain: &KinematicChain,
    q: &JointVector,
    trocar: &TrocarConfig,
) -> Result<RcmState, GeometryError> {
    let p_pre = chain.forward_kinematics(q, chain.pre_rcm_frame())?.translation.vector;
    let p_tip = chain.forward_kinematics(q, chain.shaft_tip_frame())?.translation.vector;
    let shaft = p_tip - p_pre;
    let shaft_len = shaft.norm();
    if shaft_len <= RCM_DEGENERATE_EPS {
        return Err(GeometryError::DegenerateShaft { length: shaft_len });
    }
    let p_s_hat = shaft / shaft_len;
    let p_r = trocar.position - p_pre;
    let shaft_param = p_r.dot(&p_s_hat);
    if shaft_param < 0.0 || shaft_param > shaft_len {
        log::warn!(
            "trocar projects outside the shaft segment (param {shaft_param:.4} m, shaft {shaft_len:.4} m)"
        );
    }
    let p_rcm = p_pre + p_s_hat * shaft_param;
    let residual = trocar.position - p_rcm;
    let e_rcm = residual.norm();
    let degenerate = e_rcm <= RCM_DEGENERATE_EPS;
    let p_e_hat = if degenerate { Vector3::zeros() } else { residual / e_rcm };

    let mut state = RcmState {
        p_pre,
        p_tip,
        p_s_hat,
        p_r,
        p_rcm,
        e_rcm,
        p_e_hat,
        shaft_param,
        degenerate,
        j_rcm: RowDVector::zeros(chain.num_joints()),
    };
    if !degenerate {
        state.j_rcm = rcm_jacobian(chain, q, &state)?;
    }
    Ok(state)
}

/// 3×n Jacobian of the closest shaft point `p_rcm` with respect to `q`.
pub fn rcm_point_jacobian(
    chain: &KinematicChain,
    q: &JointVector,
    state: &RcmState,
) -> Result<Matrix3xX<f64>, GeometryError> {
    let j_pre = chain.position_jacobian(q, chain.pre_rcm_frame())?;
    let j_post = chain.position_jacobian(q, chain.shaft_tip_frame())?;
    let shaft_len = (state.p_tip - state.p_pre).norm();
    if shaft_len <= RCM_DEGENERATE_EPS {
        return Err(GeometryError::DegenerateShaft { length: shaft_len });
    }
    let projector = Matrix3::identity() - state.p_s_hat * state.p_s_hat.transpose();
    // d(p_s_hat)/dq: normalized-direction derivative of the shaft vector.
    let shaft_dir_jac = (projector * (&j_post - &j_pre)) / shaft_len;
    let scale = state.p_r.dot(&state.p_s_hat);
    let coupling = state.p_s_hat * state.p_r.transpose() + Matrix3::identity() * scale;
    Ok(projector * j_pre + coupling * shaft_dir_jac)
}

/// 1×n RCM task Jacobian `p_e^T d(p_rcm)/dq`. With the sign convention used
/// here, `j_rcm * qdot > 0` moves the closest shaft point toward the trocar,
/// i.e. `d(e_rcm)/dt = -(j_rcm * qdot)`.
pub fn rcm_jacobian(
    chain: &KinematicChain,
    q: &JointVector,
    state: &RcmState,
) -> Result<RowDVector<f64>, GeometryError> {
    if state.degenerate {
        return Err(GeometryError::DegenerateRcmDirection { e_rcm: state.e_rcm });
    }
    rcm_jacobian_with_direction(chain, q, state, &state.p_e_hat)
}

/// Task Jacobian with an externally supplied error direction. Used by the
/// controller to reuse the previous cycle's direction when the shaft passes
/// exactly through the trocar.
pub fn rcm_jacobian_with_direction(
    chain: &KinematicChain,
    q: &JointVector,
    state: &RcmState,
    direction: &Vector3<f64>,
) -> Result<RowDVector<f64>, GeometryError> {
    let point_jac = rcm_point_jacobian(chain, q, state)?;
    Ok(direction.transpose() * point_jac)
}
