//! Constrained motion planning for a robot-held endoscope.
//!
//! The controller keeps the endoscope shaft pivoting about a fixed trocar
//! point (remote center of motion) as a strict-priority task while tracking a
//! visual target in the image as a secondary task. Each control cycle solves
//! two stacked quadratic programs: the first drives the RCM distance error to
//! zero under slack-relaxed joint velocity bounds, the second moves the
//! tracked feature toward the image center inside the null space of the RCM
//! task.
//!
//! Modules:
//! - [`kinematics`]: DH chain, forward kinematics, analytical Jacobians.
//! - [`rcm`]: closest shaft point, RCM error and its task Jacobian.
//! - [`visual`]: pinhole projection, interaction matrix, visual Jacobian.
//! - [`qp`]: dense convex QP solver with KKT certification.
//! - [`hqp`]: the two-level hierarchy and the pseudoinverse baseline.
//! - [`otg`]: bounded-velocity reference generation in pixel space.
//! - [`sim`]: the closed-loop simulator and its logs.
//! - [`config`]: JSON scenario schema.

// Validation guards are written `!(x > 0.0)` so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod hqp;
pub mod kinematics;
pub mod otg;
pub mod qp;
pub mod rcm;
pub mod sim;
pub mod visual;

pub use error::{ConfigError, GeometryError};
