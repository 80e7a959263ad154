//! Scenario file schema: one human-editable JSON document per scenario.
//! Angles are radians, lengths meters, image quantities pixels. Rotations are
//! given as unit quaternions in `[w, x, y, z]` order. Joints use standard
//! Denavit-Hartenberg parameters.

use std::path::Path;

use nalgebra::{DVector, Isometry3, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ConfigError;
use crate::hqp::HqpGains;
use crate::kinematics::{JointSpec, KinematicChain, Pose};
use crate::qp::QpSettings;
use crate::rcm::TrocarConfig;
use crate::sim::{OtgConfig, Scenario};
use crate::visual::{CameraIntrinsics, Marker};
use crate::otg::OtgLimits;

#[derive(Debug, Error)]
pub enum ScenarioLoadError {
    #[error("cannot read scenario file: {0}")]
    Io(#[from] std::io::Error),
    /// Parse errors carry the line and column of the offending token.
    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] ConfigError),
}

/// Loads, resolves and validates a scenario from a JSON file.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioLoadError> {
    let text = std::fs::read_to_string(path)?;
    scenario_from_json(&text)
}

/// Parses, resolves and validates a scenario from JSON text.
pub fn scenario_from_json(text: &str) -> Result<Scenario, ScenarioLoadError> {
    let file: ScenarioFile = serde_json::from_str(text)?;
    let scenario = file.resolve()?;
    scenario.validate()?;
    Ok(scenario)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub chain: ChainConfig,
    /// Trocar position, meters, base frame.
    pub trocar: [f64; 3],
    #[serde(default)]
    pub camera: CameraConfig,
    pub markers: MarkersConfig,
    pub initial_q: Vec<f64>,
    #[serde(default)]
    pub gains: GainsConfig,
    #[serde(default)]
    pub qp: QpConfig,
    #[serde(default)]
    pub otg: OtgSection,
    #[serde(default = "default_switch_threshold")]
    pub switch_threshold_px: f64,
    #[serde(default = "default_settle_cycles")]
    pub settle_cycles: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_max_duration")]
    pub max_duration: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub pixel_noise: f64,
}

fn default_switch_threshold() -> f64 {
    10.0
}
fn default_settle_cycles() -> usize {
    1
}
fn default_dt() -> f64 {
    0.002
}
fn default_max_duration() -> f64 {
    20.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub joints: Vec<JointConfig>,
    /// Joint frame hosting the shaft start point; defaults to the last one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_rcm_frame: Option<usize>,
    pub tool_transform: PoseConfig,
    pub camera_mount: PoseConfig,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    #[default]
    Revolute,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointConfig {
    #[serde(default)]
    pub kind: JointKind,
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    #[serde(default)]
    pub theta_offset: f64,
    pub q_min: f64,
    pub q_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseConfig {
    pub position: [f64; 3],
    /// Unit quaternion, `[w, x, y, z]`.
    pub quaternion: [f64; 4],
}

impl PoseConfig {
    pub fn identity() -> Self {
        Self { position: [0.0; 3], quaternion: [1.0, 0.0, 0.0, 0.0] }
    }

    fn to_pose(&self) -> Result<Pose, ConfigError> {
        let [w, x, y, z] = self.quaternion;
        let quat = Quaternion::new(w, x, y, z);
        if (quat.norm() - 1.0).abs() > 1e-6 {
            return Err(ConfigError::new(format!(
                "quaternion [{w}, {x}, {y}, {z}] is not unit length"
            )));
        }
        Ok(Isometry3::from_parts(
            Translation3::new(self.position[0], self.position[1], self.position[2]),
            UnitQuaternion::from_quaternion(quat),
        ))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub f: f64,
    /// Principal point; defaults to the image center.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_u: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_v: Option<f64>,
    pub width: f64,
    pub height: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { f: 800.0, c_u: None, c_v: None, width: 640.0, height: 512.0 }
    }
}

impl CameraConfig {
    fn to_intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            f: self.f,
            c_u: self.c_u.unwrap_or(self.width / 2.0),
            c_v: self.c_v.unwrap_or(self.height / 2.0),
            width: self.width,
            height: self.height,
        }
    }
}

/// Markers are either listed explicitly or generated as three corners of a
/// square on a plane below the trocar, perpendicular to the initial shaft
/// axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MarkersConfig {
    List(Vec<MarkerConfig>),
    Generated { square_layout: SquareLayout },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkerConfig {
    pub id: u32,
    pub xyz: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SquareLayout {
    /// Square side length (m).
    #[serde(default = "default_square_side")]
    pub side: f64,
    /// Distance of the marker plane beyond the trocar along the shaft (m).
    #[serde(default = "default_square_depth")]
    pub depth_below_trocar: f64,
    /// Lateral offset of the first marker from the optical axis (m); gives
    /// the run a visible initial convergence phase.
    #[serde(default = "default_first_offset")]
    pub first_marker_offset: f64,
}

fn default_square_side() -> f64 {
    0.02
}
fn default_square_depth() -> f64 {
    0.08
}
fn default_first_offset() -> f64 {
    0.008
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsConfig {
    /// Defaults to 0.8/dt clipped to 200 1/s.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_rcm: Option<f64>,
    #[serde(default = "default_k_vis")]
    pub k_vis: f64,
    #[serde(default = "default_svd_tolerance")]
    pub svd_tolerance: f64,
}

impl Default for GainsConfig {
    fn default() -> Self {
        Self { k_rcm: None, k_vis: default_k_vis(), svd_tolerance: default_svd_tolerance() }
    }
}

fn default_k_vis() -> f64 {
    2.0
}
fn default_svd_tolerance() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QpConfig {
    #[serde(default = "default_eps")]
    pub eps_primal: f64,
    #[serde(default = "default_eps")]
    pub eps_dual: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_regularization")]
    pub regularization: f64,
}

impl Default for QpConfig {
    fn default() -> Self {
        Self {
            eps_primal: default_eps(),
            eps_dual: default_eps(),
            max_iter: default_max_iter(),
            regularization: default_regularization(),
        }
    }
}

fn default_eps() -> f64 {
    1e-8
}
fn default_max_iter() -> usize {
    10_000
}
fn default_regularization() -> f64 {
    1e-10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OtgSection {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_otg_v_max")]
    pub v_max: f64,
    #[serde(default = "default_otg_a_max")]
    pub a_max: f64,
}

impl Default for OtgSection {
    fn default() -> Self {
        Self { enabled: true, v_max: default_otg_v_max(), a_max: default_otg_a_max() }
    }
}

fn default_true() -> bool {
    true
}
fn default_otg_v_max() -> f64 {
    300.0
}
fn default_otg_a_max() -> f64 {
    1500.0
}

impl ScenarioFile {
    /// Resolves the file into a runnable scenario: builds the chain, places
    /// generated markers, and fills gain defaults.
    pub fn resolve(&self) -> Result<Scenario, ConfigError> {
        let joints: Vec<JointSpec> = self
            .joints_validated()?
            .iter()
            .map(|j| JointSpec {
                a: j.a,
                alpha: j.alpha,
                d: j.d,
                theta_offset: j.theta_offset,
                q_min: j.q_min,
                q_max: j.q_max,
            })
            .collect();
        let chain = KinematicChain::new(
            joints,
            self.chain.pre_rcm_frame,
            self.chain.tool_transform.to_pose()?,
            self.chain.camera_mount.to_pose()?,
        )?;
        let trocar =
            TrocarConfig::new(Vector3::new(self.trocar[0], self.trocar[1], self.trocar[2]));
        let initial_q = DVector::from_vec(self.initial_q.clone());
        let markers = self.resolve_markers(&chain, &initial_q, &trocar)?;

        if !(self.dt > 0.0) {
            return Err(ConfigError::new("dt must be positive"));
        }
        let gains = HqpGains {
            k_rcm: self.gains.k_rcm.unwrap_or_else(|| (0.8 / self.dt).min(200.0)),
            k_vis: self.gains.k_vis,
            svd_tolerance: self.gains.svd_tolerance,
        };
        Ok(Scenario {
            chain,
            trocar,
            intrinsics: self.camera.to_intrinsics(),
            markers,
            initial_q,
            gains,
            qp: QpSettings {
                eps_primal: self.qp.eps_primal,
                eps_dual: self.qp.eps_dual,
                max_iter: self.qp.max_iter,
                regularization: self.qp.regularization,
            },
            otg: OtgConfig {
                enabled: self.otg.enabled,
                limits: OtgLimits { v_max: self.otg.v_max, a_max: self.otg.a_max },
            },
            switch_threshold: self.switch_threshold_px,
            settle_cycles: self.settle_cycles,
            dt: self.dt,
            max_duration: self.max_duration,
            seed: self.seed,
            pixel_noise: self.pixel_noise,
        })
    }

    fn joints_validated(&self) -> Result<&[JointConfig], ConfigError> {
        // `kind` only admits "revolute" at parse time; keep the check for
        // programmatic construction.
        for (i, joint) in self.chain.joints.iter().enumerate() {
            if joint.kind != JointKind::Revolute {
                return Err(ConfigError::new(format!("joint {i}: only revolute joints supported")));
            }
        }
        Ok(&self.chain.joints)
    }

    fn resolve_markers(
        &self,
        chain: &KinematicChain,
        initial_q: &DVector<f64>,
        trocar: &TrocarConfig,
    ) -> Result<Vec<Marker>, ConfigError> {
        match &self.markers {
            MarkersConfig::List(list) => {
                let markers: Vec<Marker> = list
                    .iter()
                    .map(|m| Marker {
                        id: m.id,
                        p_world: Vector3::new(m.xyz[0], m.xyz[1], m.xyz[2]),
                    })
                    .collect();
                let mut ids: Vec<u32> = markers.iter().map(|m| m.id).collect();
                ids.sort_unstable();
                ids.dedup();
                if ids.len() != markers.len() {
                    return Err(ConfigError::new("marker ids must be unique"));
                }
                Ok(markers)
            }
            MarkersConfig::Generated { square_layout } => {
                square_markers(chain, initial_q, trocar, square_layout)
            }
        }
    }
}

/// Places three markers on the corners of a square of the configured side
/// length, on a plane perpendicular to the initial shaft axis at the given
/// depth beyond the trocar. The first marker sits near the optical axis, the
/// second one square side along the in-plane horizontal, the third one side
/// below it.
pub fn square_markers(
    chain: &KinematicChain,
    initial_q: &DVector<f64>,
    trocar: &TrocarConfig,
    layout: &SquareLayout,
) -> Result<Vec<Marker>, ConfigError> {
    if !(layout.side > 0.0 && layout.depth_below_trocar > 0.0) {
        return Err(ConfigError::new("square layout dimensions must be positive"));
    }
    let fk = |frame: usize| {
        chain
            .forward_kinematics(initial_q, frame)
            .map_err(|e| ConfigError::new(format!("square layout: {e}")))
    };
    let p_pre = fk(chain.pre_rcm_frame())?.translation.vector;
    let p_tip = fk(chain.shaft_tip_frame())?.translation.vector;
    let shaft = p_tip - p_pre;
    if shaft.norm() <= 1e-9 {
        return Err(ConfigError::new("square layout: degenerate shaft"));
    }
    let axis = shaft.normalize();
    let lateral = axis.cross(&Vector3::z());
    let e1 = if lateral.norm() > 1e-6 {
        lateral.normalize()
    } else {
        axis.cross(&Vector3::x()).normalize()
    };
    let e2 = axis.cross(&e1);

    let plane_center = trocar.position + axis * layout.depth_below_trocar;
    let m1 = plane_center + e2 * layout.first_marker_offset;
    let m2 = m1 + e1 * layout.side;
    let m3 = m2 - e2 * layout.side;
    Ok(vec![
        Marker { id: 1, p_world: m1 },
        Marker { id: 2, p_world: m2 },
        Marker { id: 3, p_world: m3 },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "chain": {
                "joints": [
                    {"a": 0.0, "alpha": 0.0, "d": 0.0, "q_min": -3.0, "q_max": 3.0}
                ],
                "tool_transform": {"position": [0.0, 0.0, 1.0], "quaternion": [1.0, 0.0, 0.0, 0.0]},
                "camera_mount": {"position": [0.0, 0.0, 0.0], "quaternion": [1.0, 0.0, 0.0, 0.0]}
            },
            "trocar": [0.0, 0.0, 0.5],
            "markers": [{"id": 0, "xyz": [0.0, 0.0, 0.8]}],
            "initial_q": [0.0]
        }"#
        .to_string()
    }

    #[test]
    fn parses_minimal_scenario() {
        let scenario = scenario_from_json(&minimal_json()).unwrap();
        assert_eq!(scenario.chain.num_joints(), 1);
        assert_eq!(scenario.dt, 0.002);
        assert_eq!(scenario.switch_threshold, 10.0);
        // k_rcm default: 0.8/0.002 clipped to 200.
        assert_eq!(scenario.gains.k_rcm, 200.0);
        assert_eq!(scenario.intrinsics.c_u, 320.0);
    }

    #[test]
    fn missing_trocar_is_named_with_position() {
        let json = minimal_json().replace("\"trocar\": [0.0, 0.0, 0.5],", "");
        let err = scenario_from_json(&json).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("trocar"), "message was: {msg}");
        assert!(msg.contains("line"), "message was: {msg}");
    }

    #[test]
    fn rejects_non_unit_quaternion() {
        let json = minimal_json().replace("[1.0, 0.0, 0.0, 0.0]", "[1.0, 1.0, 0.0, 0.0]");
        assert!(scenario_from_json(&json).is_err());
    }

    #[test]
    fn rejects_unknown_joint_kind() {
        let json = minimal_json().replace("\"a\": 0.0,", "\"kind\": \"prismatic\", \"a\": 0.0,");
        let err = scenario_from_json(&json).unwrap_err();
        assert!(matches!(err, ScenarioLoadError::Parse(_)));
    }

    #[test]
    fn rejects_duplicate_marker_ids() {
        let json = minimal_json().replace(
            "[{\"id\": 0, \"xyz\": [0.0, 0.0, 0.8]}]",
            "[{\"id\": 0, \"xyz\": [0.0, 0.0, 0.8]}, {\"id\": 0, \"xyz\": [0.1, 0.0, 0.8]}]",
        );
        assert!(scenario_from_json(&json).is_err());
    }

    #[test]
    fn square_layout_geometry() {
        let chain = KinematicChain::default_6r();
        let q = DVector::zeros(6);
        let p_pre = chain.forward_kinematics(&q, chain.pre_rcm_frame()).unwrap().translation.vector;
        let p_tip =
            chain.forward_kinematics(&q, chain.shaft_tip_frame()).unwrap().translation.vector;
        let axis = (p_tip - p_pre).normalize();
        let trocar = TrocarConfig::new(p_pre + axis * 0.2);
        let layout = SquareLayout {
            side: 0.02,
            depth_below_trocar: 0.08,
            first_marker_offset: 0.005,
        };
        let markers = square_markers(&chain, &q, &trocar, &layout).unwrap();
        assert_eq!(markers.len(), 3);
        // Consecutive targets are one side length apart.
        assert!(((markers[1].p_world - markers[0].p_world).norm() - 0.02).abs() < 1e-12);
        assert!(((markers[2].p_world - markers[1].p_world).norm() - 0.02).abs() < 1e-12);
        // All markers lie on the plane at the configured depth.
        for m in &markers {
            let along = (m.p_world - trocar.position).dot(&axis);
            assert!((along - 0.08).abs() < 1e-12);
        }
    }
}
