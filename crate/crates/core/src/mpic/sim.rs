//! Closed-loop simulation of two Cartesian arms carrying a rigid object.
//!
//! Each arm is a point mass driven by the controller input plus the external
//! force it feels. The object is a rigid body with isotropic inertia, held at
//! two grasp points by stiff spring-dampers. The force at each wrist
//! (coupling plus any scripted disturbance) is what the controller measures.

use std::io::{Read, Write};

use nalgebra::{DVector, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ControllerConfig, MpcController, MpcError, MpcStep, DUAL_INPUTS, DUAL_STATES};
use crate::pose_gen::Pose;
use crate::skeleton::Side;
use crate::trajectory::Trajectory;
use crate::Vec3;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("trajectory rate {rate} Hz does not match the control period {dt} s")]
    RateMismatch { rate: f64, dt: f64 },
    #[error("trajectories must be non-empty and of equal length")]
    BadTrajectory,
    #[error("disturbance script line {line}: {message}")]
    Script { line: usize, message: String },
    #[error(transparent)]
    Controller(#[from] MpcError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantConfig {
    pub arm_mass: f64,
    pub arm_damping: f64,
    pub object_mass: f64,
    /// Scalar moment of inertia; defaults to a solid sphere spanning the grasp points.
    pub object_inertia: Option<f64>,
    pub coupling_stiffness: f64,
    pub coupling_damping: f64,
    pub substeps: usize,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            arm_mass: 2.0,
            arm_damping: 0.0,
            object_mass: 5.0,
            object_inertia: None,
            coupling_stiffness: 1e4,
            coupling_damping: 100.0,
            substeps: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub time: f64,
    pub arm: Side,
    pub force: Vec3,
}

/// Piecewise-constant external forces: each event holds for its arm until
/// the next event for that arm.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceScript {
    pub events: Vec<Disturbance>,
}

#[derive(Deserialize)]
struct ScriptRow {
    time: f64,
    arm: String,
    fx: f64,
    fy: f64,
    fz: f64,
}

impl DisturbanceScript {
    pub fn new(mut events: Vec<Disturbance>) -> Self {
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        DisturbanceScript { events }
    }

    /// Step of `force` on one arm from `time` on.
    pub fn step(arm: Side, time: f64, force: Vec3) -> Self {
        DisturbanceScript { events: vec![Disturbance { time, arm, force }] }
    }

    pub fn force_at(&self, arm: Side, t: f64) -> Vec3 {
        self.events.iter().rev().find(|e| e.arm == arm && e.time <= t).map_or(Vec3::zeros(), |e| e.force)
    }

    /// CSV with header `time,arm,fx,fy,fz`; `arm` is `left` or `right`.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, SimulationError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
        let mut events = Vec::new();
        for (i, row) in rdr.deserialize::<ScriptRow>().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| SimulationError::Script { line, message: e.to_string() })?;
            let arm = match row.arm.to_ascii_lowercase().as_str() {
                "left" | "l" => Side::Left,
                "right" | "r" => Side::Right,
                other => return Err(SimulationError::Script { line, message: format!("unknown arm '{other}'") }),
            };
            let values = [row.time, row.fx, row.fy, row.fz];
            if values.iter().any(|v| !v.is_finite()) || row.time < 0.0 {
                return Err(SimulationError::Script { line, message: "non-finite or negative value".into() });
            }
            events.push(Disturbance { time: row.time, arm, force: Vec3::new(row.fx, row.fy, row.fz) });
        }
        Ok(Self::new(events))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualArmPlant {
    pub config: PlantConfig,
    pub positions: [Vec3; 2],
    pub velocities: [Vec3; 2],
    pub object_position: Vec3,
    pub object_velocity: Vec3,
    pub object_orientation: UnitQuaternion<f64>,
    pub object_angular_velocity: Vec3,
    /// Grasp points in the object frame.
    grasp: [Vec3; 2],
    inertia: f64,
}

impl DualArmPlant {
    /// Arms at rest at `arms`, grasping `object` with relaxed springs.
    pub fn new(config: PlantConfig, arms: [Vec3; 2], object: Pose) -> Self {
        let inv = object.orientation.inverse();
        let grasp = arms.map(|p| inv * (p - object.position));
        let radius = 0.5 * (arms[0] - arms[1]).norm();
        let inertia = config.object_inertia.unwrap_or(0.4 * config.object_mass * radius * radius).max(1e-6);
        DualArmPlant {
            config,
            positions: arms,
            velocities: [Vec3::zeros(); 2],
            object_position: object.position,
            object_velocity: Vec3::zeros(),
            object_orientation: object.orientation,
            object_angular_velocity: Vec3::zeros(),
            grasp,
            inertia,
        }
    }

    /// Coupling force on each arm and the matching lever arms on the object.
    fn coupling(&self) -> ([Vec3; 2], [Vec3; 2]) {
        let mut forces = [Vec3::zeros(); 2];
        let mut levers = [Vec3::zeros(); 2];
        for i in 0..2 {
            let r = self.object_orientation * self.grasp[i];
            let anchor = self.object_position + r;
            let anchor_velocity = self.object_velocity + self.object_angular_velocity.cross(&r);
            forces[i] = -(self.positions[i] - anchor) * self.config.coupling_stiffness
                - (self.velocities[i] - anchor_velocity) * self.config.coupling_damping;
            levers[i] = r;
        }
        (forces, levers)
    }

    pub fn coupling_forces(&self) -> [Vec3; 2] {
        self.coupling().0
    }

    pub fn state(&self) -> DVector<f64> {
        let mut x = DVector::zeros(DUAL_STATES);
        for i in 0..2 {
            x.fixed_rows_mut::<3>(6 * i).copy_from(&self.positions[i]);
            x.fixed_rows_mut::<3>(6 * i + 3).copy_from(&self.velocities[i]);
        }
        x
    }

    pub fn is_finite(&self) -> bool {
        self.state().iter().all(|v| v.is_finite()) && self.object_position.iter().all(|v| v.is_finite())
    }

    /// Advances by `dt` with inputs and disturbances held constant.
    pub fn advance(&mut self, input: [Vec3; 2], disturbance: [Vec3; 2], dt: f64) {
        let substeps = self.config.substeps.max(1);
        let h = dt / substeps as f64;
        for _ in 0..substeps {
            let (coupling, levers) = self.coupling();
            let mut object_force = Vec3::zeros();
            let mut torque = Vec3::zeros();
            for i in 0..2 {
                let force = input[i] + coupling[i] + disturbance[i] - self.velocities[i] * self.config.arm_damping;
                self.velocities[i] += force * (h / self.config.arm_mass);
                self.positions[i] += self.velocities[i] * h;
                object_force -= coupling[i];
                torque -= levers[i].cross(&coupling[i]);
            }
            self.object_velocity += object_force * (h / self.config.object_mass);
            self.object_position += self.object_velocity * h;
            self.object_angular_velocity += torque * (h / self.inertia);
            self.object_orientation =
                UnitQuaternion::from_scaled_axis(self.object_angular_velocity * h) * self.object_orientation;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub time: f64,
    pub positions: [Vec3; 2],
    pub velocities: [Vec3; 2],
    pub reference: [Vec3; 2],
    pub u: [Vec3; 2],
    pub w: [Vec3; 2],
    pub v: [Vec3; 2],
    pub s: [Vec3; 2],
    /// Measured wrist force (coupling plus disturbance).
    pub force: [Vec3; 2],
    /// `min_i (X_max_i - |X_i|)` over the state; negative means violation.
    pub state_margin: f64,
    /// `min_i (u_max_i - |u_i|)`.
    pub input_margin: f64,
    pub fallback: bool,
    pub saturated: bool,
    pub kkt_residual: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub steps: usize,
    pub duration: f64,
    /// Max over arms of the final position error against the final reference.
    pub terminal_error: f64,
    pub max_tracking_error: f64,
    /// Error of `p_l - p_r` against the reference difference.
    pub max_relative_error: f64,
    pub rms_relative_error: f64,
    /// Largest state-limit excess over steps that were not in fallback.
    pub max_state_violation: f64,
    pub fallback_steps: usize,
    pub saturated_steps: usize,
    pub max_kkt_residual: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationLog {
    pub records: Vec<SimRecord>,
    pub final_positions: [Vec3; 2],
    pub summary: SimulationSummary,
}

fn reference_state(trajectories: &[Trajectory; 2], k: usize) -> DVector<f64> {
    let mut x = DVector::zeros(DUAL_STATES);
    for (i, traj) in trajectories.iter().enumerate() {
        let s = traj.at(k);
        x.fixed_rows_mut::<3>(6 * i).copy_from(&s.pose.position);
        x.fixed_rows_mut::<3>(6 * i + 3).copy_from(&s.linear_velocity);
    }
    x
}

fn split3(v: &[f64]) -> [Vec3; 2] {
    [Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5])]
}

/// Runs `steps` control periods. The arms start at rest on the first
/// reference sample; past the end of the trajectory the final sample is held.
pub fn simulate(
    plant_config: &PlantConfig,
    controller_config: &ControllerConfig,
    trajectories: &[Trajectory; 2],
    object: Pose,
    disturbances: &DisturbanceScript,
    steps: usize,
) -> Result<SimulationLog, SimulationError> {
    if trajectories[0].is_empty() || trajectories[0].len() != trajectories[1].len() {
        return Err(SimulationError::BadTrajectory);
    }
    let dt = controller_config.dt;
    for t in trajectories {
        if (t.rate * dt - 1.0).abs() > 1e-9 {
            return Err(SimulationError::RateMismatch { rate: t.rate, dt });
        }
    }
    let controller = controller_config.controller()?;
    simulate_with(&controller, plant_config, trajectories, object, disturbances, steps)
}

pub fn simulate_with(
    controller: &MpcController,
    plant_config: &PlantConfig,
    trajectories: &[Trajectory; 2],
    object: Pose,
    disturbances: &DisturbanceScript,
    steps: usize,
) -> Result<SimulationLog, SimulationError> {
    let gains = controller.gains();
    let horizon = gains.horizon;
    let dt = controller.model().dt;
    let start = [trajectories[0].samples[0].pose.position, trajectories[1].samples[0].pose.position];
    let mut plant = DualArmPlant::new(*plant_config, start, object);

    let mut records = Vec::with_capacity(steps);
    let mut summary = SimulationSummary { steps, duration: steps as f64 * dt, ..Default::default() };
    let mut relative_sq = 0.0;
    for k in 0..steps {
        let t = k as f64 * dt;
        let disturbance = [disturbances.force_at(Side::Left, t), disturbances.force_at(Side::Right, t)];
        let coupling = plant.coupling_forces();
        let measured = [coupling[0] + disturbance[0], coupling[1] + disturbance[1]];
        let state = plant.state();
        let step = MpcStep {
            state: state.clone(),
            reference: (k..=k + horizon).map(|j| reference_state(trajectories, j)).collect(),
            force: DVector::from_iterator(DUAL_INPUTS, measured.iter().flat_map(|f| f.iter().copied())),
            force_reference: DVector::zeros(DUAL_INPUTS),
        };
        let out = controller.control_step(&step)?;

        let state_margin =
            state.iter().zip(gains.state_limit.iter()).map(|(x, l)| l - x.abs()).fold(f64::INFINITY, f64::min);
        let input_margin =
            out.u.iter().zip(gains.input_limit.iter()).map(|(u, l)| l - u.abs()).fold(f64::INFINITY, f64::min);
        let reference = [trajectories[0].at(k).pose.position, trajectories[1].at(k).pose.position];
        for (p, r) in plant.positions.iter().zip(&reference) {
            summary.max_tracking_error = summary.max_tracking_error.max((p - r).norm());
        }
        let relative = ((plant.positions[0] - plant.positions[1]) - (reference[0] - reference[1])).norm();
        summary.max_relative_error = summary.max_relative_error.max(relative);
        relative_sq += relative * relative;
        if out.fallback {
            summary.fallback_steps += 1;
        } else {
            summary.max_state_violation = summary.max_state_violation.max(-state_margin);
            summary.max_kkt_residual = summary.max_kkt_residual.max(out.kkt_residual);
        }
        if out.saturated {
            summary.saturated_steps += 1;
        }
        let d = &out.decomposition;
        records.push(SimRecord {
            time: t,
            positions: plant.positions,
            velocities: plant.velocities,
            reference,
            u: split3(&out.u),
            w: split3(&d.w),
            v: split3(&d.v),
            s: split3(&d.s),
            force: measured,
            state_margin,
            input_margin,
            fallback: out.fallback,
            saturated: out.saturated,
            kkt_residual: out.kkt_residual,
            iterations: out.iterations,
        });

        plant.advance(split3(&out.u), disturbance, dt);
        if !plant.is_finite() || plant.positions.iter().any(|p| p.amax() > 1e3) {
            summary.diverged = true;
            summary.steps = k + 1;
            break;
        }
    }
    let end = [trajectories[0].at(summary.steps).pose.position, trajectories[1].at(summary.steps).pose.position];
    summary.terminal_error = (0..2).map(|i| (plant.positions[i] - end[i]).norm()).fold(0.0, f64::max);
    summary.rms_relative_error = (relative_sq / records.len().max(1) as f64).sqrt();
    summary.max_state_violation = summary.max_state_violation.max(0.0);
    Ok(SimulationLog { records, final_positions: plant.positions, summary })
}

/// Columns: `t`, then per arm `p, p', p_ref, u, w, v, s, F_e` (xyz each),
/// then `state_margin, input_margin, fallback, saturated`.
pub fn write_csv<W: Write>(out: W, log: &SimulationLog) -> Result<(), SimulationError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    for arm in ["l", "r"] {
        for field in ["p", "dp", "pref", "u", "w", "v", "s", "fe"] {
            for axis in ["x", "y", "z"] {
                header.push(format!("{arm}_{field}_{axis}"));
            }
        }
    }
    header.extend(["state_margin", "input_margin", "fallback", "saturated"].map(String::from));
    w.write_record(&header).map_err(|e| SimulationError::Io(e.into()))?;
    for r in &log.records {
        let mut row = vec![format!("{:.17e}", r.time)];
        for i in 0..2 {
            for v in [r.positions[i], r.velocities[i], r.reference[i], r.u[i], r.w[i], r.v[i], r.s[i], r.force[i]] {
                row.extend(v.iter().map(|x| format!("{x:.17e}")));
            }
        }
        row.push(format!("{:.17e}", r.state_margin));
        row.push(format!("{:.17e}", r.input_margin));
        row.push((r.fallback as u8).to_string());
        row.push((r.saturated as u8).to_string());
        w.write_record(&row).map_err(|e| SimulationError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}
