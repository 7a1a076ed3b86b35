//! Simplified 4-DOF upper-limb model.
//!
//! Joint conventions (right arm, torso frame with the origin at the shoulder):
//!
//! * `q1` shoulder abduction/adduction, rotation about `y`
//! * `q2` shoulder flexion/extension, rotation about `x` (flexion positive,
//!   moves the elbow towards `+y`)
//! * `q3` internal/external rotation, rotation about `z`
//! * `q4` elbow flexion/extension, rotation about `x`
//!
//! In the reference posture (`q = 0`) the upper arm hangs along `-z` and the
//! forearm points along `+y`, i.e. the elbow is bent at a right angle. Full
//! extension corresponds to `q4 = -pi/2`.
//!
//! The left arm uses the same chain reflected through the sagittal plane
//! (`x -> -x`), so the joint-limit box and the sign of flexion/abduction mean
//! the same thing on both sides.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    /// Reflection taking the right-arm chain to this side.
    pub fn mirror(self) -> Matrix3<f64> {
        match self {
            Side::Left => Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0)),
            Side::Right => Matrix3::identity(),
        }
    }

    fn mirror_sign(self) -> f64 {
        match self {
            Side::Left => -1.0,
            Side::Right => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

/// Lower joint limits `[q1, q2, q3, q4]` in radians.
pub const JOINT_LOWER: [f64; 4] = [-PI / 18.0, -PI / 3.0, -PI / 3.0, -PI / 2.0];
/// Upper joint limits `[q1, q2, q3, q4]` in radians.
pub const JOINT_UPPER: [f64; 4] = [17.0 * PI / 18.0, 17.0 * PI / 18.0, PI / 2.0, PI / 3.0];

/// Clamps each joint into the limit box.
pub fn clamp_to_limits(q: &[f64; 4]) -> [f64; 4] {
    let mut out = *q;
    for i in 0..4 {
        out[i] = out[i].clamp(JOINT_LOWER[i], JOINT_UPPER[i]);
    }
    out
}

pub fn within_limits(q: &[f64; 4]) -> bool {
    (0..4).all(|i| q[i] >= JOINT_LOWER[i] && q[i] <= JOINT_UPPER[i])
}

/// Joint angles of one arm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub q: [f64; 4],
    pub side: Side,
}

impl ArmState {
    pub fn new(side: Side, q: [f64; 4]) -> Self {
        ArmState { q, side }
    }

    pub fn zero(side: Side) -> Self {
        ArmState { q: [0.0; 4], side }
    }

    pub fn within_limits(&self) -> bool {
        within_limits(&self.q)
    }

    pub fn clamped(&self) -> Self {
        ArmState { q: clamp_to_limits(&self.q), side: self.side }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("segment length {name} must be positive and finite, got {value}")]
    BadLength { name: &'static str, value: f64 },
    #[error("left and right shoulder origins coincide")]
    CoincidentShoulders,
}

/// Segment lengths and shoulder origins, meters, in the torso frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyGeometry {
    pub upper_arm: f64,
    pub forearm: f64,
    pub shoulder_left: Vec3,
    pub shoulder_right: Vec3,
}

impl BodyGeometry {
    pub fn new(upper_arm: f64, forearm: f64, shoulder_left: Vec3, shoulder_right: Vec3) -> Result<Self, GeometryError> {
        let geom = BodyGeometry { upper_arm, forearm, shoulder_left, shoulder_right };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        for (name, value) in [("upper_arm", self.upper_arm), ("forearm", self.forearm)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(GeometryError::BadLength { name, value });
            }
        }
        if (self.shoulder_left - self.shoulder_right).norm() == 0.0 {
            return Err(GeometryError::CoincidentShoulders);
        }
        Ok(())
    }

    pub fn shoulder(&self, side: Side) -> Vec3 {
        match side {
            Side::Left => self.shoulder_left,
            Side::Right => self.shoulder_right,
        }
    }

    pub fn with_shoulders(mut self, left: Vec3, right: Vec3) -> Self {
        self.shoulder_left = left;
        self.shoulder_right = right;
        self
    }

    /// Uniformly scales segment lengths and shoulder origins.
    pub fn scaled(&self, factor: f64) -> Self {
        BodyGeometry {
            upper_arm: self.upper_arm * factor,
            forearm: self.forearm * factor,
            shoulder_left: self.shoulder_left * factor,
            shoulder_right: self.shoulder_right * factor,
        }
    }

    pub fn reach(&self) -> f64 {
        self.upper_arm + self.forearm
    }

    fn upper_arm_vec(&self) -> Vec3 {
        Vector3::new(0.0, 0.0, -self.upper_arm)
    }

    fn forearm_vec(&self) -> Vec3 {
        Vector3::new(0.0, self.forearm, 0.0)
    }
}

/// Shoulder, elbow and wrist positions of one arm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmPoints {
    pub shoulder: Vec3,
    pub elbow: Vec3,
    pub wrist: Vec3,
}

#[derive(Clone, Copy)]
enum Axis {
    X,
    Y,
    Z,
}

const JOINT_AXES: [Axis; 4] = [Axis::Y, Axis::X, Axis::Z, Axis::X];

/// `order`-th derivative of the rotation about `axis` by `angle`.
///
/// `R(a) = P + cos(a) C + sin(a) S` with `P` the projector onto the axis, so
/// differentiating shifts the phase by `pi/2` and drops `P`.
fn axis_rotation(axis: Axis, angle: f64, order: u8) -> Matrix3<f64> {
    let phase = angle + f64::from(order) * PI / 2.0;
    let (s, c) = phase.sin_cos();
    let p = if order == 0 { 1.0 } else { 0.0 };
    match axis {
        Axis::X => Matrix3::new(p, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        Axis::Y => Matrix3::new(c, 0.0, s, 0.0, p, 0.0, -s, 0.0, c),
        Axis::Z => Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, p),
    }
}

/// The four joint rotations `R1..R4` for raw angles `q`.
pub fn rotation_matrices(q: &[f64; 4]) -> [Matrix3<f64>; 4] {
    [0, 1, 2, 3].map(|i| axis_rotation(JOINT_AXES[i], q[i], 0))
}

/// Mixed partial derivative of the shoulder-relative wrist position in the
/// right-arm chain. `orders[i]` is the derivative order with respect to `q_i`.
pub(crate) fn wrist_partial_local(q: &[f64; 4], geom: &BodyGeometry, orders: [u8; 4]) -> Vec3 {
    let d: [Matrix3<f64>; 4] = [0, 1, 2, 3].map(|i| axis_rotation(JOINT_AXES[i], q[i], orders[i]));
    let chain = d[0] * d[1] * d[2];
    let mut out = chain * d[3] * geom.forearm_vec();
    if orders[3] == 0 {
        out += chain * geom.upper_arm_vec();
    }
    out
}

/// Same as [`wrist_partial_local`] but expressed in the torso frame for `side`.
pub(crate) fn wrist_partial(arm: &ArmState, geom: &BodyGeometry, orders: [u8; 4]) -> Vec3 {
    let mut v = wrist_partial_local(&arm.q, geom, orders);
    v.x *= arm.side.mirror_sign();
    v
}

pub fn forward_kinematics(arm: &ArmState, geom: &BodyGeometry) -> ArmPoints {
    let [r1, r2, r3, r4] = rotation_matrices(&arm.q);
    let chain = r1 * r2 * r3;
    let mirror = arm.side.mirror();
    let upper = chain * geom.upper_arm_vec();
    let wrist_local = chain * (geom.upper_arm_vec() + r4 * geom.forearm_vec());
    let shoulder = geom.shoulder(arm.side);
    ArmPoints { shoulder, elbow: shoulder + mirror * upper, wrist: shoulder + mirror * wrist_local }
}

/// Wrist position Jacobian, columns `d p_w / d q_i`.
pub fn position_jacobian(arm: &ArmState, geom: &BodyGeometry) -> Matrix3x4<f64> {
    let mut jac = Matrix3x4::zeros();
    for i in 0..4 {
        let mut orders = [0u8; 4];
        orders[i] = 1;
        jac.set_column(i, &wrist_partial(arm, geom, orders));
    }
    jac
}

/// Elbow position Jacobian. The last column is zero.
pub fn elbow_jacobian(arm: &ArmState, geom: &BodyGeometry) -> Matrix3x4<f64> {
    let q = &arm.q;
    let mut jac = Matrix3x4::zeros();
    for i in 0..3 {
        let d: [Matrix3<f64>; 3] = [0, 1, 2].map(|k| axis_rotation(JOINT_AXES[k], q[k], u8::from(k == i)));
        let mut col = d[0] * d[1] * d[2] * geom.upper_arm_vec();
        col.x *= arm.side.mirror_sign();
        jac.set_column(i, &col);
    }
    jac
}

/// Derivatives of the wrist Jacobian: `out[j]` is `d J / d q_j`.
pub fn position_jacobian_derivatives(arm: &ArmState, geom: &BodyGeometry) -> [Matrix3x4<f64>; 4] {
    let mut out = [Matrix3x4::zeros(); 4];
    for (j, dj) in out.iter_mut().enumerate() {
        for i in 0..4 {
            let mut orders = [0u8; 4];
            orders[i] += 1;
            orders[j] += 1;
            dj.set_column(i, &wrist_partial(arm, geom, orders));
        }
    }
    out
}
