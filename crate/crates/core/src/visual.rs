//! Pinhole camera model, point-feature projection, interaction matrix, and
//! the visual task Jacobian mapping joint velocity to pixel velocity.

use nalgebra::{Matrix2xX, Matrix6, SMatrix, Vector2, Vector3};

use crate::error::{ConfigError, GeometryError};
use crate::kinematics::{JointVector, KinematicChain, Pose};

/// Minimum depth (m) for a marker to count as being in front of the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// Square-pixel pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    /// Focal length (px).
    pub f: f64,
    /// Principal point (px).
    pub c_u: f64,
    pub c_v: f64,
    /// Image size (px).
    pub width: f64,
    pub height: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.f > 0.0) {
            return Err(ConfigError::new("focal length must be positive"));
        }
        if !(0.0..=self.width).contains(&self.c_u) || !(0.0..=self.height).contains(&self.c_v) {
            return Err(ConfigError::new("principal point must lie inside the image"));
        }
        Ok(())
    }

    pub fn principal_point(&self) -> ImagePoint {
        ImagePoint { u: self.c_u, v: self.c_v }
    }
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self { f: 800.0, c_u: 320.0, c_v: 256.0, width: 640.0, height: 512.0 }
    }
}

/// Point feature to track, fixed in the robot base frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Marker {
    pub id: u32,
    pub p_world: Vector3<f64>,
}

/// Pixel coordinates; may lie outside the image, visibility is checked
/// separately.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
}

/// Projects a marker through the pinhole model. Returns the pixel position
/// and the depth of the marker in the camera frame.
pub fn project(
    camera_pose: &Pose,
    intrinsics: &CameraIntrinsics,
    marker: &Marker,
) -> Result<(ImagePoint, f64), GeometryError> {
    let p_cam = camera_pose.inverse_transform_vector(&(marker.p_world - camera_pose.translation.vector));
    let depth = p_cam.z;
    if depth <= MIN_DEPTH {
        return Err(GeometryError::BehindCamera { depth });
    }
    Ok((
        ImagePoint {
            u: intrinsics.c_u + intrinsics.f * p_cam.x / depth,
            v: intrinsics.c_v + intrinsics.f * p_cam.y / depth,
        },
        depth,
    ))
}

/// Classical point-feature interaction matrix: maps the camera twist
/// `(v, omega)` expressed in the camera frame to the pixel velocity
/// `(u_dot, v_dot)` of a static point at the given depth.
pub fn interaction_matrix(
    pt: &ImagePoint,
    depth: f64,
    intrinsics: &CameraIntrinsics,
) -> Result<SMatrix<f64, 2, 6>, GeometryError> {
    if depth <= MIN_DEPTH {
        return Err(GeometryError::BehindCamera { depth });
    }
    let f = intrinsics.f;
    let ub = pt.u - intrinsics.c_u;
    let vb = pt.v - intrinsics.c_v;
    #[rustfmt::skip]
    let l = SMatrix::<f64, 2, 6>::new(
        -f / depth, 0.0,        ub / depth, ub * vb / f,        -(f * f + ub * ub) / f, vb,
        0.0,        -f / depth, vb / depth, (f * f + vb * vb) / f, -ub * vb / f,        -ub,
    );
    Ok(l)
}

/// Visual task Jacobian `J_vis` (2×n), pixel error relative to the principal
/// point, and the marker depth.
///
/// `J_vis = L * Ad * J_geom(camera frame)` where `Ad` rotates the base-frame
/// geometric Jacobian into the camera frame.
pub fn visual_jacobian(
    chain: &KinematicChain,
    q: &JointVector,
    intrinsics: &CameraIntrinsics,
    marker: &Marker,
) -> Result<(Matrix2xX<f64>, Vector2<f64>, f64), GeometryError> {
    let cam_pose = chain.forward_kinematics(q, chain.camera_frame())?;
    let (pixel, depth) = project(&cam_pose, intrinsics, marker)?;
    let jac = visual_jacobian_at(chain, q, intrinsics, &pixel, depth)?;
    let e_vis = Vector2::new(pixel.u - intrinsics.c_u, pixel.v - intrinsics.c_v);
    Ok((jac, e_vis, depth))
}

/// Visual task Jacobian for an already-measured pixel and depth. This is the
/// entry point used by the control loop, where the pixel measurement may
/// carry noise.
pub fn visual_jacobian_at(
    chain: &KinematicChain,
    q: &JointVector,
    intrinsics: &CameraIntrinsics,
    pixel: &ImagePoint,
    depth: f64,
) -> Result<Matrix2xX<f64>, GeometryError> {
    let cam_pose = chain.forward_kinematics(q, chain.camera_frame())?;
    let l = interaction_matrix(pixel, depth, intrinsics)?;
    let j_geom = chain.geometric_jacobian(q, chain.camera_frame())?;
    let r_t = cam_pose.rotation.to_rotation_matrix().inverse();
    let mut twist_map = Matrix6::zeros();
    twist_map.fixed_view_mut::<3, 3>(0, 0).copy_from(r_t.matrix());
    twist_map.fixed_view_mut::<3, 3>(3, 3).copy_from(r_t.matrix());
    Ok(l * twist_map * j_geom)
}
