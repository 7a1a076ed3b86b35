//! Minimum-jerk Cartesian trajectories.
//!
//! Positions move on the straight line and orientations about the constant
//! shortest-arc axis, both parameterized by `s(tau) = 10 tau^3 - 15 tau^4 + 6 tau^5`.

use std::io::Write;

use nalgebra::{Unit, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose_gen::Pose;
use crate::Vec3;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("duration must be positive and finite, got {0}")]
    BadDuration(f64),
    #[error("sample rate must be positive and finite, got {0}")]
    BadRate(f64),
    #[error("trajectories do not share a time grid")]
    GridMismatch,
    #[error("csv export failed: {0}")]
    Io(#[from] std::io::Error),
}

/// `(s, ds/dtau, d2s/dtau2)` of the quintic profile.
pub fn min_jerk_scalar(tau: f64) -> (f64, f64, f64) {
    let t = tau.clamp(0.0, 1.0);
    let (t2, t3) = (t * t, t * t * t);
    let s = t3 * (10.0 - 15.0 * t + 6.0 * t2);
    let ds = 30.0 * t2 * (1.0 - 2.0 * t + t2);
    let dds = 60.0 * t * (1.0 - 3.0 * t + 2.0 * t2);
    (s, ds, dds)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingPolicy {
    pub max_speed: f64,
    pub max_angular_speed: f64,
    pub min_duration: f64,
    pub rate: f64,
}

impl Default for TimingPolicy {
    fn default() -> Self {
        TimingPolicy { max_speed: 0.25, max_angular_speed: 0.5, min_duration: 2.0, rate: 100.0 }
    }
}

impl TimingPolicy {
    pub fn duration_for(&self, start: &Pose, end: &Pose) -> f64 {
        let dp = (end.position - start.position).norm();
        let dtheta = start.orientation.angle_to(&end.orientation);
        (dp / self.max_speed).max(dtheta / self.max_angular_speed).max(self.min_duration)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinJerkSegment {
    pub start: Pose,
    pub end: Pose,
    pub duration: f64,
    pub rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub time: f64,
    pub pose: Pose,
    pub linear_velocity: Vec3,
    pub angular_velocity: Vec3,
    pub linear_acceleration: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub rate: f64,
    pub samples: Vec<TrajectorySample>,
}

impl Trajectory {
    pub fn duration(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.time)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak_speed(&self) -> f64 {
        self.samples.iter().map(|s| s.linear_velocity.norm()).fold(0.0, f64::max)
    }

    pub fn path_length(&self) -> f64 {
        self.samples.windows(2).map(|w| (w[1].pose.position - w[0].pose.position).norm()).sum()
    }

    /// Sample at `k`, holding the final sample past the end.
    pub fn at(&self, k: usize) -> &TrajectorySample {
        &self.samples[k.min(self.samples.len() - 1)]
    }
}

impl MinJerkSegment {
    pub fn new(start: Pose, end: Pose, duration: f64, rate: f64) -> Result<Self, TrajectoryError> {
        if !(duration.is_finite() && duration > 0.0) {
            return Err(TrajectoryError::BadDuration(duration));
        }
        if !(rate.is_finite() && rate > 0.0) {
            return Err(TrajectoryError::BadRate(rate));
        }
        Ok(MinJerkSegment { start, end, duration, rate })
    }

    pub fn with_policy(start: Pose, end: Pose, policy: &TimingPolicy) -> Result<Self, TrajectoryError> {
        Self::new(start, end, policy.duration_for(&start, &end), policy.rate)
    }

    /// Number of sample intervals. The duration is rounded up to whole periods.
    pub fn intervals(&self) -> usize {
        ((self.duration * self.rate) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn effective_duration(&self) -> f64 {
        self.intervals() as f64 / self.rate
    }

    fn rotation_step(&self) -> (Vec3, f64) {
        let mut delta = self.end.orientation * self.start.orientation.inverse();
        if delta.w < 0.0 {
            delta = UnitQuaternion::new_unchecked(-delta.into_inner());
        }
        match delta.axis_angle() {
            // rounding in q1 * q0^-1 leaves angles near 1e-16 for equal orientations
            Some((axis, angle)) if angle > 1e-14 => (axis.into_inner(), angle),
            _ => (Vec3::zeros(), 0.0),
        }
    }

    /// State at time `t` in `[0, effective_duration]`.
    pub fn sample_at(&self, t: f64) -> TrajectorySample {
        let total = self.effective_duration();
        let (s, ds, dds) = min_jerk_scalar(t / total);
        let dp = self.end.position - self.start.position;
        let (axis, angle) = self.rotation_step();
        let orientation = if angle == 0.0 {
            self.start.orientation
        } else {
            UnitQuaternion::from_axis_angle(&Unit::new_unchecked(axis), s * angle) * self.start.orientation
        };
        TrajectorySample {
            time: t,
            pose: Pose { position: self.start.position + dp * s, orientation },
            linear_velocity: dp * (ds / total),
            angular_velocity: axis * (angle * ds / total),
            linear_acceleration: dp * (dds / (total * total)),
        }
    }
}

pub fn plan(seg: &MinJerkSegment) -> Trajectory {
    let n = seg.intervals();
    let mut samples: Vec<TrajectorySample> = (0..=n).map(|k| seg.sample_at(k as f64 / seg.rate)).collect();
    samples[0].pose = seg.start;
    samples[n].pose = seg.end;
    Trajectory { rate: seg.rate, samples }
}

/// Plans both arms with one duration (the longer of the two) on one grid.
pub fn plan_dual(
    starts: [Pose; 2],
    ends: [Pose; 2],
    policy: &TimingPolicy,
    duration: Option<f64>,
) -> Result<[Trajectory; 2], TrajectoryError> {
    let t = duration
        .unwrap_or_else(|| policy.duration_for(&starts[0], &ends[0]).max(policy.duration_for(&starts[1], &ends[1])));
    let left = MinJerkSegment::new(starts[0], ends[0], t, policy.rate)?;
    let right = MinJerkSegment::new(starts[1], ends[1], t, policy.rate)?;
    Ok([plan(&left), plan(&right)])
}

pub const CSV_ARM_COLUMNS: [&str; 13] = ["x", "y", "z", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz"];

/// Writes `t` followed by one block of [`CSV_ARM_COLUMNS`] per arm, prefixed `l_`/`r_`.
pub fn write_csv<W: Write>(out: W, arms: &[Trajectory; 2]) -> Result<(), TrajectoryError> {
    if arms[0].len() != arms[1].len() || arms[0].rate != arms[1].rate {
        return Err(TrajectoryError::GridMismatch);
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    for prefix in ["l_", "r_"] {
        header.extend(CSV_ARM_COLUMNS.iter().map(|c| format!("{prefix}{c}")));
    }
    w.write_record(&header).map_err(csv_io)?;
    for (a, b) in arms[0].samples.iter().zip(&arms[1].samples) {
        let mut row = vec![a.time];
        for s in [a, b] {
            let q = s.pose.orientation.quaternion();
            row.extend_from_slice(s.pose.position.as_slice());
            row.extend_from_slice(&[q.w, q.i, q.j, q.k]);
            row.extend_from_slice(s.linear_velocity.as_slice());
            row.extend_from_slice(s.angular_velocity.as_slice());
        }
        w.write_record(row.iter().map(|v| format!("{v:.17e}"))).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> TrajectoryError {
    TrajectoryError::Io(e.into())
}
