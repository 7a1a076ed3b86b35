//! Robot end-effector targets from an optimized human posture.
//!
//! The grasp is rigid: the object and both end effectors move with the human
//! wrists. The change of the left-to-right wrist vector defines a minimal
//! rotation `R_o`; the left wrist is carried to its optimized position and
//! everything else follows through `x -> w_l_opt + R_o (x - w_l)`.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Vec3;

/// Tolerance on `|v_init x v_opt|` below which opposite vectors are degenerate.
pub const ANTIPARALLEL_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn new(position: Vec3, orientation: UnitQuaternion<f64>) -> Self {
        Pose { position, orientation }
    }

    pub fn from_position(position: Vec3) -> Self {
        Pose { position, orientation: UnitQuaternion::identity() }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseGenError {
    #[error("wrist vector has zero length")]
    ZeroVector,
    /// The wrist vector flipped. `fallback` is a half turn about an axis
    /// orthogonal to the initial vector.
    #[error("initial and optimized wrist vectors are antiparallel")]
    DegenerateAntiparallel { fallback: Matrix3<f64> },
}

/// Skew-symmetric cross-product matrix, `skew(a) b = a x b`.
pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues formula for a unit axis.
pub fn axis_angle_matrix(axis: &Vec3, angle: f64) -> Matrix3<f64> {
    let k = skew(axis);
    Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

fn orthogonal_unit(v: &Vec3) -> Vec3 {
    let i = v.iamin();
    let mut e = Vector3::zeros();
    e[i] = 1.0;
    v.cross(&e).normalize()
}

/// Minimal rotation taking the direction of `v_init` onto that of `v_opt`.
pub fn relative_rotation(v_init: &Vec3, v_opt: &Vec3) -> Result<Matrix3<f64>, PoseGenError> {
    let (ni, no) = (v_init.norm(), v_opt.norm());
    if !(ni > 0.0 && no > 0.0) {
        return Err(PoseGenError::ZeroVector);
    }
    let (a, b) = (v_init / ni, v_opt / no);
    let cross = a.cross(&b);
    let sin = cross.norm();
    let cos = a.dot(&b);
    if sin < ANTIPARALLEL_TOLERANCE && cos < 0.0 {
        let fallback = axis_angle_matrix(&orthogonal_unit(&a), std::f64::consts::PI);
        return Err(PoseGenError::DegenerateAntiparallel { fallback });
    }
    if sin == 0.0 {
        return Ok(Matrix3::identity());
    }
    Ok(axis_angle_matrix(&(cross / sin), sin.atan2(cos)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspConfiguration {
    /// Left and right wrist, initial posture.
    pub wrists_init: [Vec3; 2],
    /// Left and right wrist, optimized posture.
    pub wrists_opt: [Vec3; 2],
    pub object: Pose,
    /// Left and right end effector.
    pub robot: [Pose; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTargets {
    pub rotation: Matrix3<f64>,
    pub object: Pose,
    pub robot: [Pose; 2],
    /// Image of the initial right wrist.
    pub right_wrist_mapped: Vec3,
    /// Distance between `right_wrist_mapped` and the optimized right wrist.
    /// Bounded by the allowed wrist-separation change.
    pub right_wrist_mismatch: f64,
}

impl GraspConfiguration {
    pub fn wrist_vector_init(&self) -> Vec3 {
        self.wrists_init[0] - self.wrists_init[1]
    }

    pub fn wrist_vector_opt(&self) -> Vec3 {
        self.wrists_opt[0] - self.wrists_opt[1]
    }
}

pub fn generate_targets(g: &GraspConfiguration) -> Result<GeneratedTargets, PoseGenError> {
    let rot = relative_rotation(&g.wrist_vector_init(), &g.wrist_vector_opt())?;
    let rq = UnitQuaternion::from_matrix(&rot);
    let map = |x: &Vec3| g.wrists_opt[0] + rot * (x - g.wrists_init[0]);
    let moved = |p: &Pose| Pose { position: map(&p.position), orientation: rq * p.orientation };
    let right_wrist_mapped = map(&g.wrists_init[1]);
    Ok(GeneratedTargets {
        rotation: rot,
        object: moved(&g.object),
        robot: [moved(&g.robot[0]), moved(&g.robot[1])],
        right_wrist_mapped,
        right_wrist_mismatch: (right_wrist_mapped - g.wrists_opt[1]).norm(),
    })
}
