//! Serial-chain model of the endoscope-holding manipulator.
//!
//! Frames are indexed `0..=n+2`: frame 0 is the robot base, frame `i` is the
//! frame after joint `i` (standard Denavit-Hartenberg convention), frame
//! `n+1` is the endoscope shaft tip (last joint frame composed with the tool
//! transform) and frame `n+2` is the camera optical frame (last joint frame
//! composed with the camera mount).

use nalgebra::{DVector, Isometry3, Matrix3xX, Matrix6xX, Translation3, UnitQuaternion, Vector3};

use crate::error::{ConfigError, GeometryError};

/// Rigid transform in the robot base frame.
pub type Pose = Isometry3<f64>;

/// Joint positions or velocities, one entry per joint, radians (rad/s).
pub type JointVector = DVector<f64>;

/// One revolute joint described by standard DH parameters and its limits.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    /// Link length `a` (m).
    pub a: f64,
    /// Link twist `alpha` (rad).
    pub alpha: f64,
    /// Link offset `d` (m).
    pub d: f64,
    /// Constant offset added to the joint variable (rad).
    pub theta_offset: f64,
    /// Lower joint limit (rad).
    pub q_min: f64,
    /// Upper joint limit (rad).
    pub q_max: f64,
}

impl JointSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let finite = [self.a, self.alpha, self.d, self.theta_offset, self.q_min, self.q_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(ConfigError::new("joint parameters must be finite"));
        }
        if self.q_min >= self.q_max {
            return Err(ConfigError::new(format!(
                "joint limits must satisfy q_min < q_max (got {} >= {})",
                self.q_min, self.q_max
            )));
        }
        Ok(())
    }

    /// Standard-DH transform from the previous joint frame for joint value `q`:
    /// RotZ(q + theta_offset) * TransZ(d) * TransX(a) * RotX(alpha).
    pub fn transform(&self, q: f64) -> Pose {
        let rot_z = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), q + self.theta_offset);
        let rot_x = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), self.alpha);
        // Translation and rotation commute within each pair (the offsets run
        // along the rotation axes), so each pair is a single isometry.
        Isometry3::from_parts(Translation3::new(0.0, 0.0, self.d), rot_z)
            * Isometry3::from_parts(Translation3::new(self.a, 0.0, 0.0), rot_x)
    }
}

/// Serial revolute-joint chain with named frames along the endoscope.
#[derive(Debug, Clone)]
pub struct KinematicChain {
    joints: Vec<JointSpec>,
    pre_rcm_frame: usize,
    tool_transform: Pose,
    camera_mount: Pose,
}

impl KinematicChain {
    /// Builds and validates a chain. `pre_rcm_frame` is the joint frame
    /// hosting the shaft start point `p_pre`; it defaults to the last joint
    /// frame (the endoscope mount).
    pub fn new(
        joints: Vec<JointSpec>,
        pre_rcm_frame: Option<usize>,
        tool_transform: Pose,
        camera_mount: Pose,
    ) -> Result<Self, ConfigError> {
        if joints.is_empty() {
            return Err(ConfigError::new("chain needs at least one joint"));
        }
        for (i, joint) in joints.iter().enumerate() {
            joint
                .validate()
                .map_err(|e| ConfigError::new(format!("joint {i}: {e}")))?;
        }
        let n = joints.len();
        let pre_rcm_frame = pre_rcm_frame.unwrap_or(n);
        if pre_rcm_frame > n {
            return Err(ConfigError::new(format!(
                "pre_rcm_frame {pre_rcm_frame} exceeds last joint frame {n}"
            )));
        }
        Ok(Self { joints, pre_rcm_frame, tool_transform, camera_mount })
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    /// Joint frame from which the shaft direction is measured (`p_pre`).
    pub fn pre_rcm_frame(&self) -> usize {
        self.pre_rcm_frame
    }

    /// Frame index of the endoscope shaft tip.
    pub fn shaft_tip_frame(&self) -> usize {
        self.joints.len() + 1
    }

    /// Frame index of the camera optical frame.
    pub fn camera_frame(&self) -> usize {
        self.joints.len() + 2
    }

    pub fn tool_transform(&self) -> &Pose {
        &self.tool_transform
    }

    pub fn camera_mount(&self) -> &Pose {
        &self.camera_mount
    }

    /// Lower joint limits as a vector.
    pub fn q_min(&self) -> JointVector {
        DVector::from_iterator(self.joints.len(), self.joints.iter().map(|j| j.q_min))
    }

    /// Upper joint limits as a vector.
    pub fn q_max(&self) -> JointVector {
        DVector::from_iterator(self.joints.len(), self.joints.iter().map(|j| j.q_max))
    }

    fn check_q(&self, q: &JointVector) -> Result<(), GeometryError> {
        if q.len() != self.joints.len() {
            return Err(GeometryError::JointDimension { got: q.len(), expected: self.joints.len() });
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFiniteJoint);
        }
        Ok(())
    }

    /// Poses of all joint frames `0..=n` at configuration `q`.
    fn joint_frames(&self, q: &JointVector) -> Vec<Pose> {
        let mut frames = Vec::with_capacity(self.joints.len() + 1);
        let mut pose = Pose::identity();
        frames.push(pose);
        for (joint, &qi) in self.joints.iter().zip(q.iter()) {
            pose *= joint.transform(qi);
            frames.push(pose);
        }
        frames
    }

    /// Pose of `frame` in the robot base frame.
    pub fn forward_kinematics(&self, q: &JointVector, frame: usize) -> Result<Pose, GeometryError> {
        self.check_q(q)?;
        let n = self.joints.len();
        if frame > n + 2 {
            return Err(GeometryError::FrameOutOfRange { index: frame, max: n + 2 });
        }
        let frames = self.joint_frames(q);
        Ok(self.attach_fixed(&frames, frame))
    }

    fn attach_fixed(&self, joint_frames: &[Pose], frame: usize) -> Pose {
        let n = self.joints.len();
        if frame <= n {
            joint_frames[frame]
        } else if frame == n + 1 {
            joint_frames[n] * self.tool_transform
        } else {
            joint_frames[n] * self.camera_mount
        }
    }

    /// 3×n position Jacobian of `frame`: column j is `z_j × (p_frame − p_j)`
    /// for each revolute joint preceding the frame, zero otherwise.
    pub fn position_jacobian(
        &self,
        q: &JointVector,
        frame: usize,
    ) -> Result<Matrix3xX<f64>, GeometryError> {
        Ok(self.geometric_jacobian(q, frame)?.fixed_rows::<3>(0).into_owned())
    }

    /// 6×n geometric Jacobian of `frame` in the base frame; rows 0..3 map
    /// joint velocity to the frame origin's linear velocity, rows 3..6 to its
    /// angular velocity.
    pub fn geometric_jacobian(
        &self,
        q: &JointVector,
        frame: usize,
    ) -> Result<Matrix6xX<f64>, GeometryError> {
        self.check_q(q)?;
        let n = self.joints.len();
        if frame > n + 2 {
            return Err(GeometryError::FrameOutOfRange { index: frame, max: n + 2 });
        }
        let frames = self.joint_frames(q);
        let p_frame = self.attach_fixed(&frames, frame).translation.vector;
        let moving = frame.min(n);

        let mut jac = Matrix6xX::zeros(n);
        for (j, joint_frame) in frames.iter().take(moving).enumerate() {
            // Joint j+1 rotates about the z axis of frame j.
            let axis = joint_frame.rotation * Vector3::z();
            let origin = joint_frame.translation.vector;
            let linear = axis.cross(&(p_frame - origin));
            jac.fixed_view_mut::<3, 1>(0, j).copy_from(&linear);
            jac.fixed_view_mut::<3, 1>(3, j).copy_from(&axis);
        }
        Ok(jac)
    }

    /// Central-difference approximation of the position Jacobian. Test and
    /// audit oracle; not used by the controller.
    pub fn numeric_jacobian(
        &self,
        q: &JointVector,
        frame: usize,
        step: f64,
    ) -> Result<Matrix3xX<f64>, GeometryError> {
        assert!(step > 0.0, "finite-difference step must be positive");
        self.check_q(q)?;
        let n = self.joints.len();
        let mut jac = Matrix3xX::zeros(n);
        let mut q_var = q.clone();
        for j in 0..n {
            q_var[j] = q[j] + step;
            let plus = self.forward_kinematics(&q_var, frame)?.translation.vector;
            q_var[j] = q[j] - step;
            let minus = self.forward_kinematics(&q_var, frame)?.translation.vector;
            q_var[j] = q[j];
            jac.set_column(j, &((plus - minus) / (2.0 * step)));
        }
        Ok(jac)
    }

    /// The 6R chain shipped with the repository: anthropomorphic arm with a
    /// spherical wrist, roughly 0.8 m reach, carrying a 0.3 m endoscope whose
    /// optical axis is collinear with the shaft.
    pub fn default_6r() -> Self {
        let limits = |lo: f64, hi: f64| (lo.to_radians(), hi.to_radians());
        let joint = |a: f64, alpha: f64, d: f64, (q_min, q_max): (f64, f64)| JointSpec {
            a,
            alpha,
            d,
            theta_offset: 0.0,
            q_min,
            q_max,
        };
        let half_pi = std::f64::consts::FRAC_PI_2;
        let joints = vec![
            joint(0.0, -half_pi, 0.34, limits(-170.0, 170.0)),
            joint(0.40, 0.0, 0.0, limits(-120.0, 120.0)),
            joint(0.05, -half_pi, 0.0, limits(-150.0, 150.0)),
            joint(0.0, half_pi, 0.40, limits(-170.0, 170.0)),
            joint(0.0, -half_pi, 0.0, limits(-120.0, 120.0)),
            joint(0.0, 0.0, 0.126, limits(-170.0, 170.0)),
        ];
        let tool = Isometry3::translation(0.0, 0.0, 0.30);
        let camera = Isometry3::identity();
        Self::new(joints, None, tool, camera).expect("default chain is valid")
    }
}
