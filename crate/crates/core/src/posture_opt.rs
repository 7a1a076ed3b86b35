//! Bimanual posture optimization.
//!
//! Minimizes
//!
//! ```text
//! alpha * s(q)^2 + beta * m(q)^2 + gamma * |q - q_init|^2
//! ```
//!
//! over the eight joint angles of both arms, where `s` is the worst-arm
//! ergonomic score and `m = sqrt((m_l - m0)^2 + (m_r - m0)^2)` measures how far
//! each arm's force capacity along the load direction is from the reference
//! `m0`. The wrist separation must stay within `epsilon` of its initial value
//! and every joint inside its limit box. Shoulders stay where they were
//! observed.
//!
//! The search smooths the max and the score kinks (log-sum-exp and softplus
//! with sharpness 50), handles the wrist constraint with an augmented
//! Lagrangian and the box with a projected L-BFGS inner loop, and runs from
//! several deterministic starting points. Candidates are ranked on the exact,
//! unsmoothed cost.

use std::collections::VecDeque;

use nalgebra::SVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ergonomics::{ErgonomicModel, ErgonomicScore};
use crate::exec::{self, Execution};
use crate::manipulability::{force_ellipsoid, CapacityMeasure, REGULARIZATION};
use crate::skeleton::{
    forward_kinematics, position_jacobian, position_jacobian_derivatives, within_limits, ArmState, BodyGeometry, Side,
    JOINT_LOWER, JOINT_UPPER,
};
use crate::Vec3;

type V8 = SVector<f64, 8>;

/// Joint vector of both arms, left `q1..q4` then right `q1..q4`.
pub type BimanualAngles = [f64; 8];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostureWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for PostureWeights {
    fn default() -> Self {
        PostureWeights { alpha: 1.0, beta: 0.5, gamma: 0.2 }
    }
}

impl PostureWeights {
    pub fn scaled(&self, factor: f64) -> Self {
        PostureWeights { alpha: self.alpha * factor, beta: self.beta * factor, gamma: self.gamma * factor }
    }

    fn sum(&self) -> f64 {
        self.alpha + self.beta + self.gamma
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PostureProblem {
    pub q_init: BimanualAngles,
    /// Shoulder origins are held fixed at the values stored here.
    pub geometry: BodyGeometry,
    pub load_direction: Vec3,
    pub weights: PostureWeights,
    /// Reference force capacity `m0`.
    pub reference_capacity: f64,
    /// Allowed change of the wrist separation, meters.
    pub epsilon: f64,
    pub measure: CapacityMeasure,
    pub ergonomics: ErgonomicModel,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PostureError {
    #[error("invalid posture problem: {0}")]
    InvalidProblem(String),
    #[error("initial posture infeasible: {0}")]
    InfeasibleStart(String),
}

impl PostureProblem {
    pub fn validate(&self) -> Result<(), PostureError> {
        let w = &self.weights;
        if [w.alpha, w.beta, w.gamma].iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !(w.sum() > 0.0) {
            return Err(PostureError::InvalidProblem(format!("weights must be >= 0 with a positive sum, got {w:?}")));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(PostureError::InvalidProblem(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if ((self.load_direction.norm() - 1.0).abs()) > 1e-9 {
            return Err(PostureError::InvalidProblem("load direction must be a unit vector".into()));
        }
        if !self.reference_capacity.is_finite() {
            return Err(PostureError::InvalidProblem("reference capacity must be finite".into()));
        }
        self.geometry.validate().map_err(|e| PostureError::InvalidProblem(e.to_string()))?;
        let (l, r) = split(&self.q_init);
        if !l.within_limits() || !r.within_limits() {
            return Err(PostureError::InfeasibleStart(format!("q_init outside joint limits: {:?}", self.q_init)));
        }
        Ok(())
    }

    fn initial_separation(&self) -> f64 {
        wrist_separation(&self.q_init, &self.geometry)
    }
}

pub fn split(q: &BimanualAngles) -> (ArmState, ArmState) {
    (ArmState::new(Side::Left, [q[0], q[1], q[2], q[3]]), ArmState::new(Side::Right, [q[4], q[5], q[6], q[7]]))
}

pub fn join(left: &ArmState, right: &ArmState) -> BimanualAngles {
    let mut q = [0.0; 8];
    q[..4].copy_from_slice(&left.q);
    q[4..].copy_from_slice(&right.q);
    q
}

pub fn wrists(q: &BimanualAngles, geom: &BodyGeometry) -> [Vec3; 2] {
    let (l, r) = split(q);
    [forward_kinematics(&l, geom).wrist, forward_kinematics(&r, geom).wrist]
}

pub fn wrist_separation(q: &BimanualAngles, geom: &BodyGeometry) -> f64 {
    let [l, r] = wrists(q, geom);
    (l - r).norm()
}

/// Force capacity of one arm along `direction`. Degenerate postures report 0.
pub fn arm_capacity(arm: &ArmState, geom: &BodyGeometry, direction: &Vec3, measure: CapacityMeasure) -> f64 {
    force_ellipsoid(&position_jacobian(arm, geom)).map(|e| e.capacity(direction, measure)).unwrap_or(0.0)
}

fn arm_capacity_with_gradient(
    arm: &ArmState,
    geom: &BodyGeometry,
    direction: &Vec3,
    measure: CapacityMeasure,
) -> (f64, [f64; 4]) {
    match measure {
        CapacityMeasure::Radius => {
            let jac = position_jacobian(arm, geom);
            let djs = position_jacobian_derivatives(arm, geom);
            let c = REGULARIZATION / 3.0;
            let jtd = jac.transpose() * direction;
            let a = jtd.norm_squared() + c * jac.norm_squared();
            let r = 1.0 / a.sqrt();
            let grad = std::array::from_fn(|j| {
                let da = 2.0 * jtd.dot(&(djs[j].transpose() * direction)) + 2.0 * c * jac.dot(&djs[j]);
                -0.5 * r * r * r * da
            });
            (r, grad)
        }
        CapacityMeasure::MajorAxisProjection => {
            let value = arm_capacity(arm, geom, direction, measure);
            let h = 1e-7;
            let grad = std::array::from_fn(|j| {
                let mut plus = *arm;
                plus.q[j] += h;
                let mut minus = *arm;
                minus.q[j] -= h;
                (arm_capacity(&plus, geom, direction, measure) - arm_capacity(&minus, geom, direction, measure))
                    / (2.0 * h)
            });
            (value, grad)
        }
    }
}

/// `sqrt((m_l - m0)^2 + (m_r - m0)^2)`.
pub fn manip_deviation(q: &BimanualAngles, prob: &PostureProblem) -> f64 {
    let (l, r) = split(q);
    let ml = arm_capacity(&l, &prob.geometry, &prob.load_direction, prob.measure);
    let mr = arm_capacity(&r, &prob.geometry, &prob.load_direction, prob.measure);
    ((ml - prob.reference_capacity).powi(2) + (mr - prob.reference_capacity).powi(2)).sqrt()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    /// `alpha * s^2`
    pub ergonomic: f64,
    /// `beta * m^2`
    pub manipulability: f64,
    /// `gamma * |q - q_init|^2`
    pub deviation: f64,
    pub total: f64,
    /// Bimanual ergonomic score `s`.
    pub score: f64,
    /// Capacity deviation `m`.
    pub capacity_deviation: f64,
    pub capacity_left: f64,
    pub capacity_right: f64,
}

pub fn cost_breakdown(q: &BimanualAngles, prob: &PostureProblem) -> CostBreakdown {
    let (l, r) = split(q);
    let score = prob.ergonomics.bimanual_score(&l, &r).overall;
    let ml = arm_capacity(&l, &prob.geometry, &prob.load_direction, prob.measure);
    let mr = arm_capacity(&r, &prob.geometry, &prob.load_direction, prob.measure);
    let m2 = (ml - prob.reference_capacity).powi(2) + (mr - prob.reference_capacity).powi(2);
    let dev: f64 = q.iter().zip(&prob.q_init).map(|(a, b)| (a - b).powi(2)).sum();
    let w = &prob.weights;
    let ergonomic = w.alpha * score * score;
    let manipulability = w.beta * m2;
    let deviation = w.gamma * dev;
    CostBreakdown {
        ergonomic,
        manipulability,
        deviation,
        total: ergonomic + manipulability + deviation,
        score,
        capacity_deviation: m2.sqrt(),
        capacity_left: ml,
        capacity_right: mr,
    }
}

fn objective(q: &BimanualAngles, prob: &PostureProblem, smoothing: Option<f64>, weights: &PostureWeights) -> (f64, V8) {
    let (l, r) = split(q);
    let (sl, gl) = prob.ergonomics.arm_total_with_gradient(&l.q, smoothing);
    let (sr, gr) = prob.ergonomics.arm_total_with_gradient(&r.q, smoothing);
    let (s, wl, wr) = match smoothing {
        Some(k) => {
            let top = sl.max(sr);
            let el = (k * (sl - top)).exp();
            let er = (k * (sr - top)).exp();
            (top + (el + er).ln() / k, el / (el + er), er / (el + er))
        }
        None if sl >= sr => (sl, 1.0, 0.0),
        None => (sr, 0.0, 1.0),
    };
    let (ml, dml) = arm_capacity_with_gradient(&l, &prob.geometry, &prob.load_direction, prob.measure);
    let (mr, dmr) = arm_capacity_with_gradient(&r, &prob.geometry, &prob.load_direction, prob.measure);
    let m0 = prob.reference_capacity;

    let mut value = weights.alpha * s * s + weights.beta * ((ml - m0).powi(2) + (mr - m0).powi(2));
    let mut grad = V8::zeros();
    for i in 0..4 {
        grad[i] = 2.0 * weights.alpha * s * wl * gl[i] + 2.0 * weights.beta * (ml - m0) * dml[i];
        grad[i + 4] = 2.0 * weights.alpha * s * wr * gr[i] + 2.0 * weights.beta * (mr - m0) * dmr[i];
    }
    for i in 0..8 {
        let d = q[i] - prob.q_init[i];
        value += weights.gamma * d * d;
        grad[i] += 2.0 * weights.gamma * d;
    }
    (value, grad)
}

/// Exact cost and a subgradient (the active arm of the max, right-hand slopes at kinks).
pub fn posture_cost(q: &BimanualAngles, prob: &PostureProblem) -> (f64, BimanualAngles) {
    let (v, g) = objective(q, prob, None, &prob.weights);
    (v, g.into())
}

/// Signed change of the wrist separation and its gradient.
fn separation_gap(q: &BimanualAngles, prob: &PostureProblem, initial: f64) -> (f64, V8) {
    let (l, r) = split(q);
    let geom = &prob.geometry;
    let delta = forward_kinematics(&l, geom).wrist - forward_kinematics(&r, geom).wrist;
    let dist = delta.norm();
    let mut grad = V8::zeros();
    if dist > 0.0 {
        let u = delta / dist;
        let jl = position_jacobian(&l, geom).transpose() * u;
        let jr = position_jacobian(&r, geom).transpose() * u;
        for i in 0..4 {
            grad[i] = jl[i];
            grad[i + 4] = -jr[i];
        }
    }
    (dist - initial, grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerOptions {
    pub starts: usize,
    /// Standard deviation of the start perturbations, radians.
    pub perturbation: f64,
    pub seed: u64,
    /// Sharpness of the log-sum-exp / softplus smoothing.
    pub smoothing: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions {
            starts: 8,
            perturbation: 0.15,
            seed: 7,
            smoothing: 50.0,
            max_outer: 25,
            max_inner: 300,
            execution: Execution::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizeStatus {
    Improved,
    /// No candidate beat `q_init`; the initial posture is returned.
    NoImprovement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostureSolution {
    pub q_init: BimanualAngles,
    pub q_opt: BimanualAngles,
    pub initial_cost: CostBreakdown,
    pub cost: CostBreakdown,
    pub score_init: ErgonomicScore,
    pub score_opt: ErgonomicScore,
    pub wrists_init: [Vec3; 2],
    pub wrists_opt: [Vec3; 2],
    /// `| |w_l - w_r|_opt - |w_l - w_r|_init |`, meters.
    pub constraint_residual: f64,
    pub status: OptimizeStatus,
    /// Start that produced `q_opt`; `None` with [`OptimizeStatus::NoImprovement`].
    pub start_index: Option<usize>,
    /// Exact cost reached from each start (`None` when the start ended infeasible).
    pub start_costs: Vec<Option<f64>>,
}

fn lower() -> V8 {
    V8::from_fn(|i, _| JOINT_LOWER[i % 4])
}

fn upper() -> V8 {
    V8::from_fn(|i, _| JOINT_UPPER[i % 4])
}

fn project(x: &V8) -> V8 {
    x.zip_zip_map(&lower(), &upper(), |v, lo, hi| v.clamp(lo, hi))
}

fn to_array(x: &V8) -> BimanualAngles {
    std::array::from_fn(|i| x[i])
}

/// Components that may move: not pinned at a bound with the gradient pushing outwards.
fn free_mask(x: &V8, g: &V8) -> V8 {
    let (lo, hi) = (lower(), upper());
    V8::from_fn(|i, _| {
        let pinned = (x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0);
        if pinned {
            0.0
        } else {
            1.0
        }
    })
}

/// Projected L-BFGS on the joint box.
fn minimize_box<F>(f: F, x0: V8, max_iter: usize) -> (V8, f64)
where
    F: Fn(&V8) -> (f64, V8),
{
    const MEMORY: usize = 6;
    let mut x = project(&x0);
    let (mut fx, mut gx) = f(&x);
    let mut memory: VecDeque<(V8, V8)> = VecDeque::new();
    let mut stalls = 0;
    for _ in 0..max_iter {
        let pg = x - project(&(x - gx));
        if pg.amax() < 1e-10 {
            break;
        }
        let mask = free_mask(&x, &gx);
        let g_free = gx.component_mul(&mask);

        let mut accepted = None;
        for use_memory in [true, false] {
            if !use_memory {
                memory.clear();
            }
            let d = if memory.is_empty() { -g_free } else { two_loop(&g_free, &memory, &mask) };
            if d.dot(&gx) >= 0.0 {
                continue;
            }
            let mut t = if memory.is_empty() { (0.1 / d.amax()).min(1.0) } else { 1.0 };
            for _ in 0..50 {
                let xn = project(&(x + d * t));
                let (fnew, gnew) = f(&xn);
                if fnew.is_finite() && fnew <= fx + 1e-4 * gx.dot(&(xn - x)) {
                    accepted = Some((xn, fnew, gnew));
                    break;
                }
                t *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }
        let Some((xn, fnew, gnew)) = accepted else { break };
        let s = xn - x;
        let y = gnew - gx;
        if s.dot(&y) > 1e-14 * s.norm() * y.norm() {
            memory.push_back((s, y));
            if memory.len() > MEMORY {
                memory.pop_front();
            }
        }
        let decrease = fx - fnew;
        x = xn;
        fx = fnew;
        gx = gnew;
        if decrease <= 1e-15 * (1.0 + fx.abs()) || s.amax() < 1e-13 {
            stalls += 1;
            if stalls >= 3 {
                break;
            }
        } else {
            stalls = 0;
        }
    }
    (x, fx)
}

fn two_loop(g: &V8, memory: &VecDeque<(V8, V8)>, mask: &V8) -> V8 {
    let pairs: Vec<(V8, V8, f64)> = memory
        .iter()
        .filter_map(|(s, y)| {
            let (s, y) = (s.component_mul(mask), y.component_mul(mask));
            let sy = s.dot(&y);
            (sy > 1e-16).then(|| (s, y, 1.0 / sy))
        })
        .collect();
    if pairs.is_empty() {
        return -g;
    }
    let mut q = *g;
    let mut alphas = vec![0.0; pairs.len()];
    for (k, (s, y, rho)) in pairs.iter().enumerate().rev() {
        alphas[k] = rho * s.dot(&q);
        q -= y * alphas[k];
    }
    let (s, y, _) = pairs.last().unwrap();
    let mut r = q * (s.dot(y) / y.dot(y));
    for (k, (s, y, rho)) in pairs.iter().enumerate() {
        let beta = rho * y.dot(&r);
        r += s * (alphas[k] - beta);
    }
    -r.component_mul(mask)
}

/// Augmented-Lagrangian solve of the two-sided separation constraint from one start.
fn solve_from(start: V8, prob: &PostureProblem, opts: &OptimizerOptions) -> V8 {
    let total = prob.weights.sum();
    let weights = prob.weights.scaled(1.0 / total);
    let smoothing = Some(opts.smoothing);
    let initial = prob.initial_separation();
    let eps = prob.epsilon;

    let mut multipliers = [0.0f64; 2];
    let mut penalty = 1e3;
    let mut prev_violation = f64::INFINITY;
    let mut x = project(&start);
    for _ in 0..opts.max_outer {
        let lagrangian = |z: &V8| {
            let q = to_array(z);
            let (mut v, mut g) = objective(&q, prob, smoothing, &weights);
            let (gap, dgap) = separation_gap(&q, prob, initial);
            for (k, (c, dc)) in [(gap - eps, dgap), (-gap - eps, -dgap)].into_iter().enumerate() {
                let shifted = (multipliers[k] + penalty * c).max(0.0);
                v += (shifted * shifted - multipliers[k] * multipliers[k]) / (2.0 * penalty);
                g += dc * shifted;
            }
            (v, g)
        };
        let (next, _) = minimize_box(lagrangian, x, opts.max_inner);
        let moved = (next - x).amax();
        x = next;
        let (gap, _) = separation_gap(&to_array(&x), prob, initial);
        let constraints = [gap - eps, -gap - eps];
        let violation = constraints.iter().fold(0.0f64, |a, c| a.max(*c));
        for k in 0..2 {
            multipliers[k] = (multipliers[k] + penalty * constraints[k]).max(0.0);
        }
        if violation <= 1e-10 && moved < 1e-9 {
            break;
        }
        if violation > 0.25 * prev_violation {
            penalty = (penalty * 10.0).min(1e10);
        }
        prev_violation = violation;
    }
    x
}

fn feasible(q: &BimanualAngles, prob: &PostureProblem, initial: f64) -> bool {
    let sep = wrist_separation(q, &prob.geometry);
    within_limits(&[q[0], q[1], q[2], q[3]])
        && within_limits(&[q[4], q[5], q[6], q[7]])
        && (sep - initial).abs() <= prob.epsilon
}

/// Pulls `x` onto the feasible set: Newton steps on the separation gap, then
/// bisection along the segment towards `q_init`, which is feasible.
fn repair(x: V8, prob: &PostureProblem) -> V8 {
    let initial = prob.initial_separation();
    let eps = prob.epsilon;
    let mut q = x;
    for _ in 0..20 {
        if feasible(&to_array(&q), prob, initial) {
            return q;
        }
        let (gap, grad) = separation_gap(&to_array(&q), prob, initial);
        let target = gap.signum() * eps * (1.0 - 1e-6);
        let norm2 = grad.norm_squared();
        if norm2 == 0.0 {
            break;
        }
        q = project(&(q - grad * ((gap - target) / norm2)));
    }
    if feasible(&to_array(&q), prob, initial) {
        return q;
    }
    let origin = V8::from_row_slice(&prob.q_init);
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if feasible(&to_array(&(origin + (q - origin) * mid)), prob, initial) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    origin + (q - origin) * lo
}

/// Deterministic start points: `q_init` followed by Gaussian perturbations.
pub fn start_points(prob: &PostureProblem, opts: &OptimizerOptions) -> Vec<BimanualAngles> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let normal = Normal::new(0.0, opts.perturbation.max(0.0)).expect("finite perturbation");
    let base = V8::from_row_slice(&prob.q_init);
    (0..opts.starts.max(1))
        .map(|k| {
            if k == 0 {
                prob.q_init
            } else {
                let noise = V8::from_fn(|_, _| normal.sample(&mut rng));
                to_array(&project(&(base + noise)))
            }
        })
        .collect()
}

pub fn optimize_posture(prob: &PostureProblem, opts: &OptimizerOptions) -> Result<PostureSolution, PostureError> {
    prob.validate()?;
    let initial = prob.initial_separation();
    let starts = start_points(prob, opts);
    let candidates: Vec<V8> = exec::map_slice(opts.execution, &starts, |s| {
        let x = solve_from(V8::from_row_slice(s), prob, opts);
        repair(x, prob)
    });

    let start_costs: Vec<Option<f64>> = candidates
        .iter()
        .map(|c| {
            let q = to_array(c);
            feasible(&q, prob, initial).then(|| cost_breakdown(&q, prob).total)
        })
        .collect();

    let initial_cost = cost_breakdown(&prob.q_init, prob);
    // lowest cost, ties to the lowest start index
    let best = start_costs.iter().enumerate().filter_map(|(k, c)| c.map(|c| (k, c))).fold(
        None,
        |acc: Option<(usize, f64)>, (k, c)| match acc {
            Some((_, bc)) if bc <= c => acc,
            _ => Some((k, c)),
        },
    );

    let improvement_floor = initial_cost.total - 1e-12 * (1.0 + initial_cost.total.abs());
    let (q_opt, status, start_index) = match best {
        Some((k, c)) if c < improvement_floor => (to_array(&candidates[k]), OptimizeStatus::Improved, Some(k)),
        _ => (prob.q_init, OptimizeStatus::NoImprovement, None),
    };

    let (li, ri) = split(&prob.q_init);
    let (lo, ro) = split(&q_opt);
    let wrists_opt = wrists(&q_opt, &prob.geometry);
    Ok(PostureSolution {
        q_init: prob.q_init,
        q_opt,
        initial_cost,
        cost: cost_breakdown(&q_opt, prob),
        score_init: prob.ergonomics.bimanual_score(&li, &ri),
        score_opt: prob.ergonomics.bimanual_score(&lo, &ro),
        wrists_init: wrists(&prob.q_init, &prob.geometry),
        wrists_opt,
        constraint_residual: ((wrists_opt[0] - wrists_opt[1]).norm() - initial).abs(),
        status,
        start_index,
        start_costs,
    })
}

/// Median force capacity of one arm along `direction` over uniformly sampled
/// in-limit postures. Used as the default reference `m0`.
pub fn reference_capacity(
    geom: &BodyGeometry,
    direction: &Vec3,
    measure: CapacityMeasure,
    samples: usize,
    seed: u64,
    execution: Execution,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranges: [Uniform<f64>; 4] =
        std::array::from_fn(|i| Uniform::new_inclusive(JOINT_LOWER[i], JOINT_UPPER[i]).expect("valid range"));
    let postures: Vec<[f64; 4]> =
        (0..samples.max(1)).map(|_| std::array::from_fn(|i| ranges[i].sample(&mut rng))).collect();
    let mut values = exec::map_slice(execution, &postures, |q| {
        arm_capacity(&ArmState::new(Side::Right, *q), geom, direction, measure)
    });
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
