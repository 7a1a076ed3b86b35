//! Scenario files, frame ingestion and the end-to-end run.
//!
//! A scenario is one TOML file. Paths inside it are relative to the file.
//! Stages run in order: `ik -> optimize -> posegen -> plan -> simulate`.
//! Each stage entry point recomputes what it needs from upstream in memory,
//! so running the stages one by one writes the same files as a full `run`.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ergonomics::{default_elbow_anchors, ErgonomicModel, ErgonomicScore};
use crate::exec::{self, Execution};
use crate::ik::{self, FrameSolution, IkOptions, ObservedArm, SkeletonFrame};
use crate::manipulability::CapacityMeasure;
use crate::mpic::sim::{self, DisturbanceScript, PlantConfig, SimulationLog, SimulationSummary};
use crate::mpic::ControllerConfig;
use crate::pose_gen::{self, GeneratedTargets, GraspConfiguration, Pose};
use crate::posture_opt::{
    self, BimanualAngles, CostBreakdown, OptimizeStatus, OptimizerOptions, PostureProblem, PostureSolution,
    PostureWeights,
};
use crate::skeleton::{BodyGeometry, Side};
use crate::trajectory::{self, TimingPolicy, Trajectory};
use crate::Vec3;

/// Plausible segment lengths, meters. Anything outside suggests mm or cm input.
pub const SEGMENT_BAND: (f64, f64) = (0.1, 0.6);

pub const FRAME_COLUMNS: [&str; 19] = [
    "t", "ls_x", "ls_y", "ls_z", "le_x", "le_y", "le_z", "lw_x", "lw_y", "lw_z", "rs_x", "rs_y", "rs_z", "re_x",
    "re_y", "re_z", "rw_x", "rw_y", "rw_z",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("cannot read frames: {0}")]
    Io(String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: {side:?} {segment} length {length:.4} m outside [{}, {}] m; check units", SEGMENT_BAND.0, SEGMENT_BAND.1)]
    UnitSanity { line: u64, side: Side, segment: &'static str, length: f64 },
    #[error("no frames in input")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SanityFlag {
    /// Rows were not in time order and have been sorted.
    Reordered,
    /// Two rows share a timestamp.
    DuplicateTime,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestedFrames {
    pub frames: Vec<SkeletonFrame>,
    pub flags: Vec<SanityFlag>,
}

/// Parses the 19-column frame CSV (`t` then left and right shoulder, elbow,
/// wrist, `x y z` each).
pub fn parse_frames<R: Read>(reader: R) -> Result<IngestedFrames, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
    let header = rdr.headers().map_err(|e| IngestError::Parse { line: 1, message: e.to_string() })?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names != FRAME_COLUMNS {
        return Err(IngestError::Parse { line: 1, message: format!("expected header {}", FRAME_COLUMNS.join(",")) });
    }
    let mut rows: Vec<(u64, SkeletonFrame)> = Vec::new();
    for record in rdr.records() {
        let record = record
            .map_err(|e| IngestError::Parse { line: e.position().map_or(0, |p| p.line()), message: e.to_string() })?;
        let line = record.position().map_or(0, |p| p.line());
        let mut values = [0.0; 19];
        for (i, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| IngestError::Parse {
                line,
                message: format!("column {} is not a number: '{field}'", FRAME_COLUMNS[i]),
            })?;
            if !v.is_finite() {
                return Err(IngestError::Parse { line, message: format!("column {} is not finite", FRAME_COLUMNS[i]) });
            }
            values[i] = v;
        }
        let point = |k: usize| Vec3::new(values[k], values[k + 1], values[k + 2]);
        let frame = SkeletonFrame {
            time: values[0],
            left: ObservedArm { shoulder: point(1), elbow: point(4), wrist: point(7) },
            right: ObservedArm { shoulder: point(10), elbow: point(13), wrist: point(16) },
        };
        for side in Side::BOTH {
            let arm = frame.arm(side);
            for (segment, length) in [("upper arm", arm.upper_arm_length()), ("forearm", arm.forearm_length())] {
                if !(SEGMENT_BAND.0..=SEGMENT_BAND.1).contains(&length) {
                    return Err(IngestError::UnitSanity { line, side, segment, length });
                }
            }
        }
        rows.push((line, frame));
    }
    if rows.is_empty() {
        return Err(IngestError::Empty);
    }
    let mut flags = Vec::new();
    if rows.windows(2).any(|w| w[1].1.time < w[0].1.time) {
        flags.push(SanityFlag::Reordered);
    }
    // stable sort keeps file order among equal times
    rows.sort_by(|a, b| a.1.time.total_cmp(&b.1.time));
    if rows.windows(2).any(|w| w[1].1.time == w[0].1.time) {
        flags.push(SanityFlag::DuplicateTime);
    }
    Ok(IngestedFrames { frames: rows.into_iter().map(|(_, f)| f).collect(), flags })
}

pub fn ingest_frames(path: &Path) -> Result<IngestedFrames, IngestError> {
    let file = fs::File::open(path).map_err(|e| IngestError::Io(format!("{}: {e}", path.display())))?;
    parse_frames(file)
}

pub fn write_frames_csv<W: std::io::Write>(out: W, frames: &[SkeletonFrame]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(FRAME_COLUMNS)?;
    for f in frames {
        let mut row = vec![f.time];
        for arm in [&f.left, &f.right] {
            for p in [arm.shoulder, arm.elbow, arm.wrist] {
                row.extend_from_slice(p.as_slice());
            }
        }
        w.write_record(row.iter().map(|v| format!("{v:.17e}")))?;
    }
    w.flush()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseConfig {
    pub position: [f64; 3],
    /// `[w, x, y, z]`, normalized on load.
    #[serde(default = "identity_quaternion")]
    pub orientation: [f64; 4],
}

fn identity_quaternion() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl Default for PoseConfig {
    fn default() -> Self {
        PoseConfig { position: [0.0; 3], orientation: identity_quaternion() }
    }
}

impl PoseConfig {
    pub fn to_pose(&self) -> Result<Pose, String> {
        let [w, x, y, z] = self.orientation;
        let q = Quaternion::new(w, x, y, z);
        if !(q.norm() > 1e-9) || self.position.iter().chain(self.orientation.iter()).any(|v| !v.is_finite()) {
            return Err(format!("invalid pose {self:?}"));
        }
        Ok(Pose::new(Vector3::from(self.position), UnitQuaternion::from_quaternion(q)))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    /// Calibrated from the frames (median) when absent.
    pub upper_arm: Option<f64>,
    pub forearm: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectConfig {
    pub pose: PoseConfig,
    #[serde(default = "default_object_mass")]
    pub mass: f64,
}

fn default_object_mass() -> f64 {
    PlantConfig::default().object_mass
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotConfig {
    pub left: PoseConfig,
    pub right: PoseConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    /// In the human frame.
    pub load_direction: [f64; 3],
    pub measure: CapacityMeasure,
    /// Median over sampled postures when absent.
    pub reference_capacity: Option<f64>,
    pub capacity_samples: usize,
    pub starts: usize,
    pub perturbation: f64,
    pub smoothing: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let w = PostureWeights::default();
        let o = OptimizerOptions::default();
        OptimizerConfig {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            epsilon: 0.02,
            load_direction: [0.0, 0.0, 1.0],
            measure: CapacityMeasure::Radius,
            reference_capacity: None,
            capacity_samples: 4096,
            starts: o.starts,
            perturbation: o.perturbation,
            smoothing: o.smoothing,
            max_outer: o.max_outer,
            max_inner: o.max_inner,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErgonomicsConfig {
    /// `[flexion_deg, score]` pairs for the elbow curve.
    pub elbow_anchors_deg: Option<Vec<[f64; 2]>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub max_speed: f64,
    pub max_angular_speed: f64,
    pub min_duration: f64,
    /// Overrides the speed-based duration.
    pub duration: Option<f64>,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        let p = TimingPolicy::default();
        TrajectoryConfig {
            max_speed: p.max_speed,
            max_angular_speed: p.max_angular_speed,
            min_duration: p.min_duration,
            duration: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Total simulated time; defaults to the trajectory plus `settle`.
    pub duration: Option<f64>,
    pub settle: f64,
    pub disturbances: Option<PathBuf>,
    pub coupling_stiffness: f64,
    pub coupling_damping: f64,
    pub arm_mass: f64,
    pub arm_damping: f64,
    pub object_inertia: Option<f64>,
    pub substeps: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        let p = PlantConfig::default();
        SimulationConfig {
            duration: None,
            settle: 2.0,
            disturbances: None,
            coupling_stiffness: p.coupling_stiffness,
            coupling_damping: p.coupling_damping,
            arm_mass: p.arm_mass,
            arm_damping: p.arm_damping,
            object_inertia: p.object_inertia,
            substeps: p.substeps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub seed: u64,
    pub frames: PathBuf,
    /// Frame to optimize; negative counts from the end. Defaults to the last.
    #[serde(default)]
    pub frame_index: Option<i64>,
    #[serde(default)]
    pub geometry: GeometryConfig,
    /// Pose of the human (skeleton) frame in the robot frame.
    #[serde(default)]
    pub human_frame: PoseConfig,
    pub object: ObjectConfig,
    pub robot: RobotConfig,
    #[serde(default)]
    pub ik: IkOptions,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub ergonomics: ErgonomicsConfig,
    #[serde(default)]
    pub trajectory: TrajectoryConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    /// Directory that relative paths are resolved against.
    pub base_dir: PathBuf,
    pub name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Ik,
    Optimize,
    Posegen,
    Plan,
    Simulate,
    Output,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Ik => "ik",
            Stage::Optimize => "optimize",
            Stage::Posegen => "posegen",
            Stage::Plan => "plan",
            Stage::Simulate => "simulate",
            Stage::Output => "output",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("[{}] {message}", stage.name())]
    Stage { stage: Stage, message: String },
}

impl PipelineError {
    /// 2 for configuration problems, 1 for failures inside a stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { .. } => 1,
        }
    }

    fn stage(stage: Stage, e: impl std::fmt::Display) -> Self {
        PipelineError::Stage { stage, message: e.to_string() }
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let name = path.file_stem().map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned());
        Self::from_toml(&text, base_dir, name)
    }

    pub fn from_toml(text: &str, base_dir: PathBuf, name: String) -> Result<Self, PipelineError> {
        let config: ScenarioConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let scenario = Scenario { config, base_dir, name };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let c = &self.config;
        let err = |m: String| Err(PipelineError::Config(m));
        let frames = self.resolve(&c.frames);
        if !frames.is_file() {
            return err(format!("frames file {} not found", frames.display()));
        }
        if let Some(d) = &c.simulation.disturbances {
            let d = self.resolve(d);
            if !d.is_file() {
                return err(format!("disturbance file {} not found", d.display()));
            }
        }
        for pose in [&c.human_frame, &c.object.pose, &c.robot.left, &c.robot.right] {
            pose.to_pose().map_err(PipelineError::Config)?;
        }
        let o = &c.optimizer;
        if [o.alpha, o.beta, o.gamma].iter().any(|w| !(*w >= 0.0)) || !(o.alpha + o.beta + o.gamma > 0.0) {
            return err("optimizer weights must be >= 0 with a positive sum".into());
        }
        if !(o.epsilon >= 0.0) {
            return err("optimizer.epsilon must be >= 0".into());
        }
        if !(Vector3::from(o.load_direction).norm() > 0.0) {
            return err("optimizer.load_direction must be nonzero".into());
        }
        if o.starts == 0 || o.capacity_samples == 0 {
            return err("optimizer.starts and optimizer.capacity_samples must be positive".into());
        }
        if let Some(a) = &c.ergonomics.elbow_anchors_deg {
            if a.len() < 2 || a.windows(2).any(|w| !(w[1][0] > w[0][0])) {
                return err("ergonomics.elbow_anchors_deg needs at least two anchors with increasing angles".into());
            }
        }
        let t = &c.trajectory;
        if !(t.max_speed > 0.0 && t.max_angular_speed > 0.0 && t.min_duration > 0.0)
            || t.duration.is_some_and(|d| !(d > 0.0))
        {
            return err("trajectory speeds and durations must be positive".into());
        }
        if !(c.object.mass > 0.0) || !(c.simulation.arm_mass > 0.0) || !(c.controller.arm_mass > 0.0) {
            return err("masses must be positive".into());
        }
        if !(c.controller.dt > 0.0)
            || !(c.simulation.settle >= 0.0)
            || c.simulation.duration.is_some_and(|d| !(d > 0.0))
        {
            return err("controller.dt and simulation durations must be positive".into());
        }
        c.controller.controller().map_err(|e| PipelineError::Config(format!("controller: {e}")))?;
        Ok(())
    }

    /// SHA-256 of the resolved configuration, seed included.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn ergonomic_model(&self) -> ErgonomicModel {
        match &self.config.ergonomics.elbow_anchors_deg {
            Some(a) => ErgonomicModel::with_elbow_anchors(a.iter().map(|[d, s]| (d.to_radians(), *s)).collect()),
            None => ErgonomicModel::with_elbow_anchors(default_elbow_anchors()),
        }
    }

    fn pose(p: &PoseConfig) -> Pose {
        p.to_pose().expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IkStage {
    pub frames: Vec<SkeletonFrame>,
    pub flags: Vec<SanityFlag>,
    pub frames_hash: String,
    /// Geometry with the shoulders of the selected frame.
    pub geometry: BodyGeometry,
    pub solutions: Vec<FrameSolution>,
    pub frame_index: usize,
}

impl IkStage {
    pub fn selected(&self) -> &FrameSolution {
        &self.solutions[self.frame_index]
    }

    pub fn q_init(&self) -> BimanualAngles {
        posture_opt::join(&self.selected().left.state, &self.selected().right.state)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn stage_ik(s: &Scenario) -> Result<IkStage, PipelineError> {
    let c = &s.config;
    let path = s.resolve(&c.frames);
    let bytes = fs::read(&path).map_err(|e| PipelineError::stage(Stage::Ingest, format!("{}: {e}", path.display())))?;
    let ingested = parse_frames(bytes.as_slice()).map_err(|e| PipelineError::stage(Stage::Ingest, e))?;
    let frames = ingested.frames;
    let n = frames.len() as i64;
    let index = c.frame_index.unwrap_or(-1);
    let index = if index < 0 { n + index } else { index };
    if !(0..n).contains(&index) {
        return Err(PipelineError::Config(format!("frame_index {:?} out of range for {n} frames", c.frame_index)));
    }
    let index = index as usize;

    let arms = || frames.iter().flat_map(|f| [f.left, f.right]);
    let upper = c.geometry.upper_arm.unwrap_or_else(|| median(arms().map(|a| a.upper_arm_length()).collect()));
    let fore = c.geometry.forearm.unwrap_or_else(|| median(arms().map(|a| a.forearm_length()).collect()));
    let sel = &frames[index];
    let geometry = BodyGeometry::new(upper, fore, sel.left.shoulder, sel.right.shoulder)
        .map_err(|e| PipelineError::stage(Stage::Ik, e))?;

    let mut solutions = Vec::with_capacity(frames.len());
    for (k, result) in ik::solve_sequence(&frames, &geometry, &c.ik).into_iter().enumerate() {
        match result {
            Ok(sol) => solutions.push(sol),
            Err(e) => return Err(PipelineError::stage(Stage::Ik, format!("frame {k} (t = {}): {e}", frames[k].time))),
        }
    }
    Ok(IkStage {
        frames,
        flags: ingested.flags,
        frames_hash: hex::encode(Sha256::digest(&bytes)),
        geometry,
        solutions,
        frame_index: index,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeStage {
    pub reference_capacity: f64,
    pub load_direction: Vec3,
    pub epsilon: f64,
    pub solution: PostureSolution,
}

pub fn posture_problem(s: &Scenario, ik: &IkStage, execution: Execution) -> PostureProblem {
    let o = &s.config.optimizer;
    let load_direction = Vector3::from(o.load_direction).normalize();
    let reference_capacity = o.reference_capacity.unwrap_or_else(|| {
        posture_opt::reference_capacity(
            &ik.geometry,
            &load_direction,
            o.measure,
            o.capacity_samples,
            s.config.seed.wrapping_add(1),
            execution,
        )
    });
    PostureProblem {
        q_init: ik.q_init(),
        geometry: ik.geometry,
        load_direction,
        weights: PostureWeights { alpha: o.alpha, beta: o.beta, gamma: o.gamma },
        reference_capacity,
        epsilon: o.epsilon,
        measure: o.measure,
        ergonomics: s.ergonomic_model(),
    }
}

pub fn stage_optimize(s: &Scenario, ik: &IkStage, execution: Execution) -> Result<OptimizeStage, PipelineError> {
    let problem = posture_problem(s, ik, execution);
    let o = &s.config.optimizer;
    let opts = OptimizerOptions {
        starts: o.starts,
        perturbation: o.perturbation,
        seed: s.config.seed,
        smoothing: o.smoothing,
        max_outer: o.max_outer,
        max_inner: o.max_inner,
        execution,
    };
    let solution =
        posture_opt::optimize_posture(&problem, &opts).map_err(|e| PipelineError::stage(Stage::Optimize, e))?;
    Ok(OptimizeStage {
        reference_capacity: problem.reference_capacity,
        load_direction: problem.load_direction,
        epsilon: problem.epsilon,
        solution,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetsStage {
    /// Everything in the robot frame.
    pub grasp: GraspConfiguration,
    pub targets: GeneratedTargets,
}

pub fn stage_posegen(s: &Scenario, opt: &OptimizeStage) -> Result<TargetsStage, PipelineError> {
    let c = &s.config;
    let human = Scenario::pose(&c.human_frame);
    let to_robot = |p: &Vec3| human.position + human.orientation * p;
    let grasp = GraspConfiguration {
        wrists_init: opt.solution.wrists_init.map(|w| to_robot(&w)),
        wrists_opt: opt.solution.wrists_opt.map(|w| to_robot(&w)),
        object: Scenario::pose(&c.object.pose),
        robot: [Scenario::pose(&c.robot.left), Scenario::pose(&c.robot.right)],
    };
    let targets = pose_gen::generate_targets(&grasp).map_err(|e| PipelineError::stage(Stage::Posegen, e))?;
    Ok(TargetsStage { grasp, targets })
}

pub fn stage_plan(s: &Scenario, targets: &TargetsStage) -> Result<[Trajectory; 2], PipelineError> {
    let t = &s.config.trajectory;
    let policy = TimingPolicy {
        max_speed: t.max_speed,
        max_angular_speed: t.max_angular_speed,
        min_duration: t.min_duration,
        rate: 1.0 / s.config.controller.dt,
    };
    trajectory::plan_dual(targets.grasp.robot, targets.targets.robot, &policy, t.duration)
        .map_err(|e| PipelineError::stage(Stage::Plan, e))
}

pub fn plant_config(s: &Scenario) -> PlantConfig {
    let sim = &s.config.simulation;
    PlantConfig {
        arm_mass: sim.arm_mass,
        arm_damping: sim.arm_damping,
        object_mass: s.config.object.mass,
        object_inertia: sim.object_inertia,
        coupling_stiffness: sim.coupling_stiffness,
        coupling_damping: sim.coupling_damping,
        substeps: sim.substeps,
    }
}

pub fn stage_simulate(
    s: &Scenario,
    targets: &TargetsStage,
    plan: &[Trajectory; 2],
) -> Result<SimulationLog, PipelineError> {
    let c = &s.config;
    let script = match &c.simulation.disturbances {
        Some(p) => {
            let path = s.resolve(p);
            let file = fs::File::open(&path)
                .map_err(|e| PipelineError::stage(Stage::Simulate, format!("{}: {e}", path.display())))?;
            DisturbanceScript::from_csv(file).map_err(|e| PipelineError::stage(Stage::Simulate, e))?
        }
        None => DisturbanceScript::default(),
    };
    let duration = c.simulation.duration.unwrap_or(plan[0].duration() + c.simulation.settle);
    let steps = (duration / c.controller.dt - 1e-9).ceil().max(1.0) as usize;
    sim::simulate(&plant_config(s), &c.controller, plan, targets.grasp.object, &script, steps)
        .map_err(|e| PipelineError::stage(Stage::Simulate, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IkReport {
    pub frames: usize,
    pub flags: Vec<SanityFlag>,
    pub frame_index: usize,
    pub frame_time: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub max_residual: f64,
    pub selected_residual: [f64; 2],
    pub q_init: BimanualAngles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub status: OptimizeStatus,
    pub start_index: Option<usize>,
    pub q_opt: BimanualAngles,
    pub cost_init: CostBreakdown,
    pub cost_opt: CostBreakdown,
    pub score_init: ErgonomicScore,
    pub score_opt: ErgonomicScore,
    pub reference_capacity: f64,
    pub capacity_init: [f64; 2],
    pub capacity_opt: [f64; 2],
    pub epsilon: f64,
    pub constraint_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetsReport {
    pub rotation_angle: f64,
    pub object: Pose,
    pub robot: [Pose; 2],
    pub right_wrist_mismatch: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub duration: f64,
    pub samples: usize,
    pub peak_speed: [f64; 2],
    pub path_length: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub config_hash: String,
    pub frames_hash: String,
    pub seed: u64,
    pub ik: IkReport,
    pub optimization: OptimizationReport,
    pub targets: TargetsReport,
    pub trajectory: TrajectoryReport,
    pub simulation: SimulationSummary,
}

/// Results of every stage up to the one requested.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineRun {
    pub ik: Option<IkStage>,
    pub optimize: Option<OptimizeStage>,
    pub targets: Option<TargetsStage>,
    pub trajectories: Option<[Trajectory; 2]>,
    pub simulation: Option<SimulationLog>,
}

pub fn run_until(s: &Scenario, last: Stage, execution: Execution) -> Result<PipelineRun, PipelineError> {
    let mut run = PipelineRun::default();
    let ik = stage_ik(s)?;
    if last == Stage::Ik || last == Stage::Ingest {
        run.ik = Some(ik);
        return Ok(run);
    }
    let opt = stage_optimize(s, &ik, execution)?;
    run.ik = Some(ik);
    if last == Stage::Optimize {
        run.optimize = Some(opt);
        return Ok(run);
    }
    let targets = stage_posegen(s, &opt)?;
    run.optimize = Some(opt);
    if last == Stage::Posegen {
        run.targets = Some(targets);
        return Ok(run);
    }
    let plan = stage_plan(s, &targets)?;
    if last == Stage::Plan {
        run.targets = Some(targets);
        run.trajectories = Some(plan);
        return Ok(run);
    }
    run.simulation = Some(stage_simulate(s, &targets, &plan)?);
    run.targets = Some(targets);
    run.trajectories = Some(plan);
    Ok(run)
}

fn capacities(q: &BimanualAngles, problem_geom: &BodyGeometry, d: &Vec3, measure: CapacityMeasure) -> [f64; 2] {
    let (l, r) = posture_opt::split(q);
    [posture_opt::arm_capacity(&l, problem_geom, d, measure), posture_opt::arm_capacity(&r, problem_geom, d, measure)]
}

pub fn build_report(s: &Scenario, run: &PipelineRun) -> Option<RunReport> {
    let (ik, opt, tg, plan, sim) = (
        run.ik.as_ref()?,
        run.optimize.as_ref()?,
        run.targets.as_ref()?,
        run.trajectories.as_ref()?,
        run.simulation.as_ref()?,
    );
    let sel = ik.selected();
    let sol = &opt.solution;
    let measure = s.config.optimizer.measure;
    let rotation = nalgebra::Rotation3::from_matrix_unchecked(tg.targets.rotation);
    Some(RunReport {
        scenario: s.name.clone(),
        config_hash: s.config_hash(),
        frames_hash: ik.frames_hash.clone(),
        seed: s.config.seed,
        ik: IkReport {
            frames: ik.frames.len(),
            flags: ik.flags.clone(),
            frame_index: ik.frame_index,
            frame_time: sel.time,
            upper_arm: ik.geometry.upper_arm,
            forearm: ik.geometry.forearm,
            max_residual: ik.solutions.iter().flat_map(|f| [f.left.residual, f.right.residual]).fold(0.0, f64::max),
            selected_residual: [sel.left.residual, sel.right.residual],
            q_init: ik.q_init(),
        },
        optimization: OptimizationReport {
            status: sol.status,
            start_index: sol.start_index,
            q_opt: sol.q_opt,
            cost_init: sol.initial_cost,
            cost_opt: sol.cost,
            score_init: sol.score_init,
            score_opt: sol.score_opt,
            reference_capacity: opt.reference_capacity,
            capacity_init: capacities(&sol.q_init, &ik.geometry, &opt.load_direction, measure),
            capacity_opt: capacities(&sol.q_opt, &ik.geometry, &opt.load_direction, measure),
            epsilon: opt.epsilon,
            constraint_residual: sol.constraint_residual,
        },
        targets: TargetsReport {
            rotation_angle: rotation.angle(),
            object: tg.targets.object,
            robot: tg.targets.robot,
            right_wrist_mismatch: tg.targets.right_wrist_mismatch,
        },
        trajectory: TrajectoryReport {
            duration: plan[0].duration(),
            samples: plan[0].len(),
            peak_speed: [plan[0].peak_speed(), plan[1].peak_speed()],
            path_length: [plan[0].path_length(), plan[1].path_length()],
        },
        simulation: sim.summary.clone(),
    })
}

pub const IK_FILE: &str = "ik.csv";
pub const POSTURE_FILE: &str = "posture.json";
pub const TARGETS_FILE: &str = "targets.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const SIMULATION_CSV: &str = "simulation.csv";
pub const SIMULATION_JSON: &str = "simulation.json";
pub const REPORT_FILE: &str = "report.json";

fn output_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::stage(Stage::Output, e)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).map_err(output_err)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| output_err(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<fs::File, PipelineError> {
    fs::File::create(path).map_err(|e| output_err(format!("{}: {e}", path.display())))
}

/// Writes the files owned by `stage`. Returns the paths written.
pub fn write_stage_outputs(stage: Stage, run: &PipelineRun, out: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    fs::create_dir_all(out).map_err(|e| output_err(format!("{}: {e}", out.display())))?;
    let missing = || output_err(format!("stage {} has no results", stage.name()));
    let mut written = Vec::new();
    match stage {
        Stage::Ingest | Stage::Ik => {
            let ik = run.ik.as_ref().ok_or_else(missing)?;
            let path = out.join(IK_FILE);
            let mut w = csv::Writer::from_writer(create(&path)?);
            let mut header = vec!["t".to_string()];
            for arm in ["l", "r"] {
                header.extend((1..=4).map(|j| format!("{arm}_q{j}")));
                header.push(format!("{arm}_residual"));
            }
            w.write_record(&header).map_err(output_err)?;
            for f in &ik.solutions {
                let mut row = vec![f.time];
                for a in [&f.left, &f.right] {
                    row.extend_from_slice(&a.state.q);
                    row.push(a.residual);
                }
                w.write_record(row.iter().map(|v| format!("{v:.17e}"))).map_err(output_err)?;
            }
            w.flush().map_err(output_err)?;
            written.push(path);
        }
        Stage::Optimize => {
            let path = out.join(POSTURE_FILE);
            write_json(&path, run.optimize.as_ref().ok_or_else(missing)?)?;
            written.push(path);
        }
        Stage::Posegen => {
            let path = out.join(TARGETS_FILE);
            write_json(&path, run.targets.as_ref().ok_or_else(missing)?)?;
            written.push(path);
        }
        Stage::Plan => {
            let path = out.join(TRAJECTORY_FILE);
            trajectory::write_csv(create(&path)?, run.trajectories.as_ref().ok_or_else(missing)?)
                .map_err(output_err)?;
            written.push(path);
        }
        Stage::Simulate => {
            let log = run.simulation.as_ref().ok_or_else(missing)?;
            let csv_path = out.join(SIMULATION_CSV);
            sim::write_csv(create(&csv_path)?, log).map_err(output_err)?;
            let json_path = out.join(SIMULATION_JSON);
            write_json(&json_path, &log.summary)?;
            written.extend([csv_path, json_path]);
        }
        Stage::Output => {}
    }
    Ok(written)
}

pub const STAGES: [Stage; 5] = [Stage::Ik, Stage::Optimize, Stage::Posegen, Stage::Plan, Stage::Simulate];

/// Full pipeline: every stage's files plus `report.json`.
pub fn run_pipeline(s: &Scenario, out: &Path, execution: Execution) -> Result<RunReport, PipelineError> {
    let run = run_until(s, Stage::Simulate, execution)?;
    for stage in STAGES {
        write_stage_outputs(stage, &run, out)?;
    }
    let report = build_report(s, &run).ok_or_else(|| output_err("incomplete run"))?;
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

#[derive(Debug)]
pub struct BatchEntry {
    pub config: PathBuf,
    pub result: Result<RunReport, PipelineError>,
}

/// Runs every `*.toml` scenario in `dir` into `out/<scenario name>/`.
pub fn run_batch(
    dir: &Path,
    out: &Path,
    seed: Option<u64>,
    execution: Execution,
) -> Result<Vec<BatchEntry>, PipelineError> {
    let mut configs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    configs.sort();
    if configs.is_empty() {
        return Err(PipelineError::Config(format!("no .toml scenarios in {}", dir.display())));
    }
    Ok(exec::map_slice(execution, &configs, |path| {
        let result = Scenario::load(path).and_then(|mut s| {
            if let Some(seed) = seed {
                s.config.seed = seed;
            }
            run_pipeline(&s, &out.join(&s.name), execution)
        });
        BatchEntry { config: path.clone(), result }
    }))
}
