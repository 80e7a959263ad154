use thiserror::Error;

/// Errors raised by kinematics and task-geometry computations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("frame index {index} out of range (valid range 0..={max})")]
    FrameOutOfRange { index: usize, max: usize },

    #[error("joint vector has {got} entries, chain has {expected} joints")]
    JointDimension { got: usize, expected: usize },

    #[error("joint vector contains a non-finite entry")]
    NonFiniteJoint,

    #[error("degenerate shaft: pre-RCM frame and tip coincide (length {length:.3e} m)")]
    DegenerateShaft { length: f64 },

    #[error("RCM error direction undefined: shaft passes through the trocar (e_rcm {e_rcm:.3e} m)")]
    DegenerateRcmDirection { e_rcm: f64 },

    #[error("marker behind camera (depth {depth:.6} m)")]
    BehindCamera { depth: f64 },
}

/// Errors raised when a chain, scenario, or controller parameter set is
/// inconsistent.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

impl ConfigError {
    pub fn new(msg: impl Into<String>) -> Self {
        ConfigError(msg.into())
    }
}
