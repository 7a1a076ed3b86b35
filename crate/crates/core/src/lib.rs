//! Upper-limb postural optimization for bimanual human-robot co-carrying.
//!
//! The crate is organised as a pipeline. Skeleton frames are turned into
//! joint angles ([`ik`]), scored for ergonomics ([`ergonomics`]) and force
//! manipulability ([`manipulability`]), re-optimized ([`posture_opt`]),
//! converted into robot end-effector targets ([`pose_gen`]), planned as
//! minimum-jerk motions ([`trajectory`]) and tracked by a model-predictive
//! impedance controller on a simulated dual-arm plant ([`mpic`]).
//! [`pipeline`] wires the stages together behind a file-based interface.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ergonomics;
pub mod exec;
pub mod ik;
pub mod manipulability;
pub mod mpic;
pub mod pipeline;
pub mod pose_gen;
pub mod posture_opt;
pub mod skeleton;
pub mod trajectory;

pub use exec::Execution;

/// 3-vector used for positions and directions throughout the crate.
pub type Vec3 = nalgebra::Vector3<f64>;
