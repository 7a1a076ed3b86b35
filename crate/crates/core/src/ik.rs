//! Joint angles from observed shoulder, elbow and wrist markers.
//!
//! Each arm is solved as a box-constrained least-squares problem on the elbow
//! and wrist position errors. The solver is a projected Levenberg-Marquardt
//! iteration. It is started from the caller's seed and from the two
//! closed-form branches of the chain; among the candidates reaching the
//! lowest residual, the one closest to the seed wins so that consecutive
//! frames stay on the same branch.

use nalgebra::{SMatrix, SVector, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::skeleton::{
    clamp_to_limits, elbow_jacobian, forward_kinematics, position_jacobian, within_limits, ArmState, BodyGeometry,
    Side, JOINT_LOWER, JOINT_UPPER,
};
use crate::Vec3;

/// Observed marker positions of one arm, torso frame, meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedArm {
    pub shoulder: Vec3,
    pub elbow: Vec3,
    pub wrist: Vec3,
}

impl ObservedArm {
    pub fn upper_arm_length(&self) -> f64 {
        (self.elbow - self.shoulder).norm()
    }

    pub fn forearm_length(&self) -> f64 {
        (self.wrist - self.elbow).norm()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonFrame {
    pub time: f64,
    pub left: ObservedArm,
    pub right: ObservedArm,
}

impl SkeletonFrame {
    pub fn arm(&self, side: Side) -> &ObservedArm {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IkOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    /// Residual above which hitting the iteration cap is reported as failure.
    pub residual_threshold: f64,
    /// Allowed relative deviation of observed segment lengths from the geometry.
    pub length_tolerance: f64,
}

impl Default for IkOptions {
    fn default() -> Self {
        IkOptions {
            max_iterations: 200,
            gradient_tolerance: 1e-8,
            step_tolerance: 1e-10,
            residual_threshold: 1e-3,
            length_tolerance: 0.2,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IkError {
    #[error(
        "{side:?} {segment} length {observed:.4} m deviates more than {tolerance:.0}% from calibrated {expected:.4} m"
    )]
    InfeasibleFrame { side: Side, segment: &'static str, observed: f64, expected: f64, tolerance: f64 },
    #[error("{side:?} arm did not converge after {iterations} iterations (residual {residual:.3e} m)")]
    NonConvergence { side: Side, residual: f64, iterations: usize },
    #[error("seed posture outside joint limits")]
    SeedOutOfLimits,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSolution {
    pub state: ArmState,
    /// `sqrt(|e_elbow|^2 + |e_wrist|^2)`, meters.
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSolution {
    pub time: f64,
    pub left: ArmSolution,
    pub right: ArmSolution,
}

/// Rejects arms whose observed segment lengths are off by more than the tolerance.
pub fn check_segments(obs: &ObservedArm, side: Side, geom: &BodyGeometry, tolerance: f64) -> Result<(), IkError> {
    for (segment, observed, expected) in
        [("upper arm", obs.upper_arm_length(), geom.upper_arm), ("forearm", obs.forearm_length(), geom.forearm)]
    {
        if !observed.is_finite() || (observed - expected).abs() > tolerance * expected {
            return Err(IkError::InfeasibleFrame { side, segment, observed, expected, tolerance: tolerance * 100.0 });
        }
    }
    Ok(())
}

type Residual = SVector<f64, 6>;
type ResidualJacobian = SMatrix<f64, 6, 4>;

struct ArmTarget<'a> {
    obs: &'a ObservedArm,
    side: Side,
    geom: BodyGeometry,
}

impl ArmTarget<'_> {
    fn residual(&self, q: &[f64; 4]) -> Residual {
        let p = forward_kinematics(&ArmState::new(self.side, *q), &self.geom);
        let e = p.elbow - self.obs.elbow;
        let w = p.wrist - self.obs.wrist;
        Residual::new(e.x, e.y, e.z, w.x, w.y, w.z)
    }

    fn jacobian(&self, q: &[f64; 4]) -> ResidualJacobian {
        let arm = ArmState::new(self.side, *q);
        let mut jac = ResidualJacobian::zeros();
        jac.fixed_view_mut::<3, 4>(0, 0).copy_from(&elbow_jacobian(&arm, &self.geom));
        jac.fixed_view_mut::<3, 4>(3, 0).copy_from(&position_jacobian(&arm, &self.geom));
        jac
    }

    /// Closed-form candidates ignoring joint limits, clamped afterwards.
    fn analytic_candidates(&self) -> Vec<[f64; 4]> {
        let mirror = self.side.mirror();
        let upper = mirror * (self.obs.elbow - self.obs.shoulder);
        let fore = mirror * (self.obs.wrist - self.obs.elbow);
        if upper.norm() == 0.0 || fore.norm() == 0.0 {
            return Vec::new();
        }
        // upper-arm direction = [-s1 c2, s2, -c1 c2]
        let u = upper.normalize();
        let f = fore.normalize();
        let q2a = u.y.clamp(-1.0, 1.0).asin();
        let branches = [(q2a, (-u.x).atan2(-u.z)), (std::f64::consts::PI - q2a, u.x.atan2(u.z))];
        branches
            .iter()
            .map(|&(q2, q1)| {
                let q1 = wrap_angle(q1);
                let q2 = wrap_angle(q2);
                let [r1, r2, _, _] = crate::skeleton::rotation_matrices(&[q1, q2, 0.0, 0.0]);
                // forearm in the R3 frame = [-s3 c4, c3 c4, s4]
                let l = (r1 * r2).transpose() * f;
                let q4 = l.z.clamp(-1.0, 1.0).asin();
                let q3 = (-l.x).atan2(l.y);
                clamp_to_limits(&[q1, q2, q3, q4])
            })
            .collect()
    }
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut x = a % two_pi;
    if x > std::f64::consts::PI {
        x -= two_pi;
    } else if x <= -std::f64::consts::PI {
        x += two_pi;
    }
    x
}

struct Descent {
    q: [f64; 4],
    cost: f64,
    iterations: usize,
    converged: bool,
}

fn projected_gradient(q: &[f64; 4], g: &Vector4<f64>) -> Vector4<f64> {
    let mut pg = *g;
    for i in 0..4 {
        let at_lower = q[i] <= JOINT_LOWER[i] && g[i] > 0.0;
        let at_upper = q[i] >= JOINT_UPPER[i] && g[i] < 0.0;
        if at_lower || at_upper {
            pg[i] = 0.0;
        }
    }
    pg
}

fn levenberg_marquardt(target: &ArmTarget, start: [f64; 4], opts: &IkOptions) -> Descent {
    let mut q = clamp_to_limits(&start);
    let mut r = target.residual(&q);
    let mut cost = r.norm_squared();
    let mut mu = 1e-3;
    for it in 0..opts.max_iterations {
        let jac = target.jacobian(&q);
        let g = jac.transpose() * r;
        let pg = projected_gradient(&q, &g);
        if pg.norm() < opts.gradient_tolerance {
            return Descent { q, cost, iterations: it, converged: true };
        }
        let free: [bool; 4] = std::array::from_fn(|i| pg[i] != 0.0 || g[i] == 0.0);
        let normal = jac.transpose() * jac;
        loop {
            let mut rhs = -g;
            let mut system = normal;
            for i in 0..4 {
                if free[i] {
                    system[(i, i)] += mu * (1.0 + normal[(i, i)]);
                } else {
                    system.row_mut(i).fill(0.0);
                    system.column_mut(i).fill(0.0);
                    system[(i, i)] = 1.0;
                    rhs[i] = 0.0;
                }
            }
            let step = system.cholesky().map(|c| c.solve(&rhs)).unwrap_or_else(Vector4::zeros);
            let candidate = clamp_to_limits(&std::array::from_fn(|i| q[i] + step[i]));
            let moved: f64 = (0..4).map(|i| (candidate[i] - q[i]).powi(2)).sum::<f64>().sqrt();
            let r_new = target.residual(&candidate);
            let cost_new = r_new.norm_squared();
            if cost_new < cost {
                q = candidate;
                r = r_new;
                cost = cost_new;
                mu = (mu / 3.0).max(1e-12);
                if moved < opts.step_tolerance {
                    return Descent { q, cost, iterations: it + 1, converged: true };
                }
                break;
            }
            mu *= 4.0;
            if mu > 1e12 || moved < opts.step_tolerance {
                // no decrease possible along the damped step: stationary to working precision
                return Descent { q, cost, iterations: it + 1, converged: true };
            }
        }
    }
    Descent { q, cost, iterations: opts.max_iterations, converged: false }
}

fn distance(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    (0..4).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

/// Solves one arm. The shoulder of the chain is taken from the observation.
pub fn solve_arm(
    obs: &ObservedArm,
    side: Side,
    geom: &BodyGeometry,
    seed: &ArmState,
    opts: &IkOptions,
) -> Result<ArmSolution, IkError> {
    if !within_limits(&seed.q) {
        return Err(IkError::SeedOutOfLimits);
    }
    check_segments(obs, side, geom, opts.length_tolerance)?;
    let mut local = *geom;
    match side {
        Side::Left => local.shoulder_left = obs.shoulder,
        Side::Right => local.shoulder_right = obs.shoulder,
    }
    let target = ArmTarget { obs, side, geom: local };

    let mut starts = vec![seed.q];
    starts.extend(target.analytic_candidates());
    let runs: Vec<Descent> = starts.iter().map(|s| levenberg_marquardt(&target, *s, opts)).collect();
    let best_cost = runs.iter().map(|d| d.cost).fold(f64::INFINITY, f64::min);
    let tie = best_cost + 1e-18 + 1e-9 * best_cost;
    let chosen = runs
        .iter()
        .filter(|d| d.cost <= tie)
        .min_by(|a, b| distance(&a.q, &seed.q).total_cmp(&distance(&b.q, &seed.q)))
        .expect("at least one start");
    let residual = chosen.cost.sqrt();
    if !chosen.converged && residual > opts.residual_threshold {
        return Err(IkError::NonConvergence { side, residual, iterations: chosen.iterations });
    }
    let iterations = runs.iter().map(|d| d.iterations).sum();
    Ok(ArmSolution { state: ArmState::new(side, chosen.q), residual, iterations })
}

/// Solves both arms of a frame, each warm-started from its seed.
pub fn solve_ik(
    frame: &SkeletonFrame,
    geom: &BodyGeometry,
    seed_left: &ArmState,
    seed_right: &ArmState,
    opts: &IkOptions,
) -> Result<FrameSolution, IkError> {
    let left = solve_arm(&frame.left, Side::Left, geom, seed_left, opts)?;
    let right = solve_arm(&frame.right, Side::Right, geom, seed_right, opts)?;
    Ok(FrameSolution { time: frame.time, left, right })
}

/// Solves a recorded sequence in order, warm-starting each frame from the
/// previous successful solution (zero posture before the first).
pub fn solve_sequence(
    frames: &[SkeletonFrame],
    geom: &BodyGeometry,
    opts: &IkOptions,
) -> Vec<Result<FrameSolution, IkError>> {
    let mut seed_left = ArmState::zero(Side::Left);
    let mut seed_right = ArmState::zero(Side::Right);
    frames
        .iter()
        .map(|frame| {
            let out = solve_ik(frame, geom, &seed_left, &seed_right, opts);
            if let Ok(sol) = &out {
                seed_left = sol.left.state;
                seed_right = sol.right.state;
            }
            out
        })
        .collect()
}

/// Cold-starts every frame independently, e.g. frames from unrelated sessions.
pub fn solve_batch(
    frames: &[SkeletonFrame],
    geom: &BodyGeometry,
    opts: &IkOptions,
    execution: Execution,
) -> Vec<Result<FrameSolution, IkError>> {
    exec::map_slice(execution, frames, |frame| {
        solve_ik(frame, geom, &ArmState::zero(Side::Left), &ArmState::zero(Side::Right), opts)
    })
}
