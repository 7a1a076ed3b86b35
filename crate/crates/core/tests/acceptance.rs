//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cocarry::ergonomics::{shoulder_score, ErgonomicModel};
use cocarry::ik::{self, IkOptions, ObservedArm, SkeletonFrame};
use cocarry::manipulability::force_ellipsoid;
use cocarry::mpic::qp::{solve_qp, QpOptions, QpSolution, QuadraticProgram};
use cocarry::mpic::{InteractionModel, MpcController, MpcGains, MpcStep};
use cocarry::pipeline::{self, Scenario, Stage};
use cocarry::pose_gen::{generate_targets, GraspConfiguration, Pose};
use cocarry::posture_opt::{self, BimanualAngles, PostureProblem};
use cocarry::skeleton::{
    elbow_jacobian, forward_kinematics, position_jacobian, ArmState, BodyGeometry, Side, JOINT_LOWER, JOINT_UPPER,
};
use cocarry::trajectory::{min_jerk_scalar, plan_dual, TimingPolicy};
use cocarry::{Execution, Vec3};
use nalgebra::{DMatrix, DVector, Matrix3x4, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

// tolerances, one block per criterion
const IK_RESIDUAL: f64 = 1e-6;
const IK_BUDGET: Duration = Duration::from_secs(5);
const JACOBIAN_REL: f64 = 1e-5;
const FD_STEP: f64 = 1e-6;
const DUALITY_TOL: f64 = 1e-9;
const FORCE_ORACLE_TOL: f64 = 1e-3;
const CONTINUITY_TOL: f64 = 1e-12;
const LATTICE_GAP: f64 = 0.02;
const OPTIMIZE_BUDGET: Duration = Duration::from_secs(30);
const ISOMETRY_TOL: f64 = 1e-9;
const MACHINE_ZERO: f64 = 1e-12;
const QP_ORACLE_TOL: f64 = 1e-6;
const KKT_TOL: f64 = 1e-8;
const TERMINAL_ERROR: f64 = 1e-3;
const STATE_VIOLATION: f64 = 1e-8;
const SIM_BUDGET: Duration = Duration::from_secs(60);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_q(r: &mut ChaCha8Rng) -> [f64; 4] {
    std::array::from_fn(|i| r.random_range(JOINT_LOWER[i]..=JOINT_UPPER[i]))
}

fn unit(r: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn geometry() -> BodyGeometry {
    BodyGeometry::new(0.3, 0.26, Vec3::new(0.19, 0.0, 1.4), Vec3::new(-0.19, 0.0, 1.4)).unwrap()
}

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn fixture_scenarios() -> Vec<Scenario> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(fixtures_dir())
        .expect("fixtures directory")
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Scenario::load(p).expect("fixture scenario loads")).collect()
}

fn fixture(name: &str) -> Scenario {
    Scenario::load(&fixtures_dir().join(format!("{name}.toml"))).expect("fixture scenario loads")
}

fn criterion_1() -> Outcome {
    let geom = geometry();
    let opts = IkOptions::default();
    let mut r = rng(1);
    let frames: Vec<SkeletonFrame> = (0..200)
        .map(|k| {
            let arm = |side, q| {
                let p = forward_kinematics(&ArmState::new(side, q), &geom);
                ObservedArm { shoulder: p.shoulder, elbow: p.elbow, wrist: p.wrist }
            };
            SkeletonFrame {
                time: k as f64,
                left: arm(Side::Left, random_q(&mut r)),
                right: arm(Side::Right, random_q(&mut r)),
            }
        })
        .collect();
    let start = Instant::now();
    let mut worst = 0.0_f64;
    let mut failures = 0;
    for f in &frames {
        match ik::solve_ik(f, &geom, &ArmState::zero(Side::Left), &ArmState::zero(Side::Right), &opts) {
            Ok(sol) => {
                for (s, obs) in [(&sol.left.state, &f.left), (&sol.right.state, &f.right)] {
                    let p = forward_kinematics(s, &geom);
                    worst = worst.max((p.elbow - obs.elbow).norm()).max((p.wrist - obs.wrist).norm());
                }
            }
            Err(_) => failures += 1,
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures == 0 && worst < IK_RESIDUAL && elapsed < IK_BUDGET,
        format!(
            "200 postures, worst position residual {worst:.2e} m, {failures} failures, {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn fd_jacobian(arm: &ArmState, geom: &BodyGeometry, point: fn(&ArmState, &BodyGeometry) -> Vec3) -> Matrix3x4<f64> {
    let mut j = Matrix3x4::zeros();
    for i in 0..4 {
        let (mut plus, mut minus) = (*arm, *arm);
        plus.q[i] += FD_STEP;
        minus.q[i] -= FD_STEP;
        j.set_column(i, &((point(&plus, geom) - point(&minus, geom)) / (2.0 * FD_STEP)));
    }
    j
}

fn criterion_2() -> Outcome {
    let geom = geometry();
    let mut r = rng(2);
    let mut worst = 0.0_f64;
    for k in 0..1000 {
        let side = if k % 2 == 0 { Side::Left } else { Side::Right };
        let arm = ArmState::new(side, random_q(&mut r));
        let wrist = fd_jacobian(&arm, &geom, |a, g| forward_kinematics(a, g).wrist);
        let elbow = fd_jacobian(&arm, &geom, |a, g| forward_kinematics(a, g).elbow);
        let jw = position_jacobian(&arm, &geom);
        let je = elbow_jacobian(&arm, &geom);
        worst = worst.max((jw - wrist).norm() / jw.norm()).max((je - elbow).norm() / je.norm().max(1e-12));
    }
    outcome(worst < JACOBIAN_REL, format!("1000 states, max relative error {worst:.2e}"))
}

/// `max { a : |J' (a d)| <= 1 }` by dense sampling of `a`, refined once.
fn sampled_force_radius(j: &Matrix3x4<f64>, d: &Vec3) -> f64 {
    let feasible = |a: f64| (j.transpose() * (d * a)).norm() <= 1.0;
    let sv = j.singular_values();
    let (mut lo, mut hi) = (0.0, 1.0 / sv.min() * 1.01);
    for _ in 0..3 {
        let n = 20_000;
        let step = (hi - lo) / n as f64;
        let mut best = lo;
        for i in 0..=n {
            let a = lo + step * i as f64;
            if feasible(a) {
                best = a;
            }
        }
        lo = best;
        hi = best + step;
    }
    lo
}

fn criterion_3() -> Outcome {
    let geom = geometry();
    let mut r = rng(3);
    let (mut duality, mut oracle, mut directions) = (0.0_f64, 0.0_f64, 0);
    // 100 directions over full-rank postures; every fifth also against the sampling oracle
    while directions < 100 {
        let side = if directions % 2 == 0 { Side::Left } else { Side::Right };
        let arm = ArmState::new(side, random_q(&mut r));
        let j = position_jacobian(&arm, &geom);
        let eig = (j * j.transpose()).symmetric_eigenvalues();
        if eig.min() < 1e-4 * eig.max() {
            continue;
        }
        let e = force_ellipsoid(&j).expect("full-rank posture");
        let d = unit(&mut r);
        duality = duality.max((e.radius_along(&d) * e.velocity_capacity_along(&d) - 1.0).abs());
        if directions % 5 == 0 {
            let sampled = sampled_force_radius(&j, &d);
            oracle = oracle.max((e.radius_along(&d) - sampled).abs() / sampled);
        }
        directions += 1;
    }
    outcome(
        duality <= DUALITY_TOL && oracle <= FORCE_ORACLE_TOL,
        format!("duality error {duality:.2e}, force radius vs sampling oracle {oracle:.2e} (relative)"),
    )
}

fn criterion_4() -> Outcome {
    let anchors = [(0.0, 0.0), (2.0 * PI / 9.0, 1.0), (PI / 4.0, 2.0), (PI / 2.0, 3.0), (PI, 4.0)];
    let exact = anchors.iter().all(|&(q, s)| shoulder_score(q) == s);
    let model = ErgonomicModel::default();
    let h = 1e-14;
    let mut jump = 0.0_f64;
    for curve in [&model.flexion, &model.abduction, &model.rotation, &model.elbow] {
        for &(x, y) in curve.knots() {
            jump = jump.max((curve.eval(x - h) - curve.eval(x + h)).abs()).max((curve.eval(x) - y).abs());
        }
    }
    let mut r = rng(4);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (l, rr) = (ArmState::new(Side::Left, random_q(&mut r)), ArmState::new(Side::Right, random_q(&mut r)));
        let total = |q: &[f64; 4]| model.arm_score(q).total;
        if model.bimanual_score(&l, &rr).overall != total(&l.q).max(total(&rr.q)) {
            mismatches += 1;
        }
    }
    outcome(
        exact && jump <= CONTINUITY_TOL && mismatches == 0,
        format!("anchors exact: {exact}, max breakpoint jump {jump:.1e}, bimanual mismatches {mismatches}/1000"),
    )
}

/// Cost rebuilt from kinematics, the Jacobian and the ergonomic curves.
struct LatticeCost<'a> {
    prob: &'a PostureProblem,
    separation0: f64,
}

impl LatticeCost<'_> {
    fn arms(q: &BimanualAngles) -> [ArmState; 2] {
        [ArmState::new(Side::Left, [q[0], q[1], q[2], q[3]]), ArmState::new(Side::Right, [q[4], q[5], q[6], q[7]])]
    }

    fn separation(&self, q: &BimanualAngles) -> f64 {
        let [l, r] = Self::arms(q);
        (forward_kinematics(&l, &self.prob.geometry).wrist - forward_kinematics(&r, &self.prob.geometry).wrist).norm()
    }

    fn score(&self, q: &BimanualAngles) -> f64 {
        Self::arms(q).iter().map(|a| self.prob.ergonomics.arm_score(&a.q).total).fold(f64::MIN, f64::max)
    }

    fn capacity(&self, arm: &ArmState) -> f64 {
        let j = position_jacobian(arm, &self.prob.geometry);
        let jjt = j * j.transpose();
        let metric = jjt + nalgebra::Matrix3::identity() * (1e-10 * jjt.trace() / 3.0);
        let d = &self.prob.load_direction;
        1.0 / d.dot(&(metric * d)).sqrt()
    }

    fn cost(&self, q: &BimanualAngles) -> f64 {
        let w = &self.prob.weights;
        let s = self.score(q);
        let m2: f64 = Self::arms(q).iter().map(|a| (self.capacity(a) - self.prob.reference_capacity).powi(2)).sum();
        let dev: f64 = q.iter().zip(&self.prob.q_init).map(|(a, b)| (a - b).powi(2)).sum();
        w.alpha * s * s + w.beta * m2 + w.gamma * dev
    }

    fn feasible(&self, q: &BimanualAngles) -> bool {
        Self::arms(q).iter().all(|a| a.within_limits())
            && (self.separation(q) - self.separation0).abs() <= self.prob.epsilon
    }

    /// Best feasible point of the 5^8 lattice `q_init + {-0.3, -0.15, 0, 0.15, 0.3}^8`.
    fn lattice_best(&self) -> f64 {
        const OFFSETS: [f64; 5] = [-0.3, -0.15, 0.0, 0.15, 0.3];
        (0..5usize.pow(8))
            .into_par_iter()
            .map(|mut idx| {
                let mut q = self.prob.q_init;
                for qi in q.iter_mut() {
                    *qi += OFFSETS[idx % 5];
                    idx /= 5;
                }
                if self.feasible(&q) {
                    self.cost(&q)
                } else {
                    f64::INFINITY
                }
            })
            .reduce(|| f64::INFINITY, f64::min)
    }
}

fn criterion_5() -> Outcome {
    let mut pass = true;
    let mut details = Vec::new();
    for s in fixture_scenarios() {
        let start = Instant::now();
        let ik = pipeline::stage_ik(&s).expect("fixture IK");
        let opt = pipeline::stage_optimize(&s, &ik, Execution::Parallel).expect("fixture optimization");
        let elapsed = start.elapsed();
        let prob = pipeline::posture_problem(&s, &ik, Execution::Parallel);
        assert_eq!(prob.reference_capacity, opt.reference_capacity);
        let oracle =
            LatticeCost { separation0: posture_opt::wrist_separation(&prob.q_init, &prob.geometry), prob: &prob };
        let sol = &opt.solution;
        let (c0, c1) = (oracle.cost(&sol.q_init), oracle.cost(&sol.q_opt));
        let (s0, s1) = (oracle.score(&sol.q_init), oracle.score(&sol.q_opt));
        let residual = (oracle.separation(&sol.q_opt) - oracle.separation0).abs();
        let best = oracle.lattice_best();
        let ok = c1 < c0
            && s1 < s0
            && residual <= prob.epsilon
            && c1 <= best * (1.0 + LATTICE_GAP)
            && elapsed < OPTIMIZE_BUDGET;
        pass &= ok;
        details.push(format!(
            "{}: cost {c0:.3}->{c1:.3} (lattice {best:.3}), score {s0:.2}->{s1:.2}, |dsep| {residual:.4} <= {}, {:.1} s",
            s.name,
            prob.epsilon,
            elapsed.as_secs_f64()
        ));
    }
    outcome(pass && !details.is_empty(), details.join("; "))
}

fn random_pose(r: &mut ChaCha8Rng) -> Pose {
    let p = Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(0.0..2.0));
    Pose::new(p, UnitQuaternion::from_scaled_axis(unit(r) * r.random_range(0.0..PI)))
}

fn criterion_6() -> Outcome {
    let mut r = rng(6);
    let (mut distance, mut alignment, mut skipped) = (0.0_f64, 0.0_f64, 0);
    for _ in 0..500 {
        let pts = |r: &mut ChaCha8Rng| [random_pose(r).position, random_pose(r).position];
        let g = GraspConfiguration {
            wrists_init: pts(&mut r),
            wrists_opt: pts(&mut r),
            object: random_pose(&mut r),
            robot: [random_pose(&mut r), random_pose(&mut r)],
        };
        let Ok(t) = generate_targets(&g) else {
            skipped += 1;
            continue;
        };
        let before = [g.wrists_init[0], g.wrists_init[1], g.object.position, g.robot[0].position, g.robot[1].position];
        let after =
            [g.wrists_opt[0], t.right_wrist_mapped, t.object.position, t.robot[0].position, t.robot[1].position];
        for i in 0..5 {
            for k in i + 1..5 {
                distance = distance.max(((before[i] - before[k]).norm() - (after[i] - after[k]).norm()).abs());
            }
        }
        let vi = (g.wrists_init[0] - g.wrists_init[1]).normalize();
        let vo = (g.wrists_opt[0] - g.wrists_opt[1]).normalize();
        alignment = alignment.max((t.rotation * vi - vo).norm());
    }
    outcome(
        distance <= ISOMETRY_TOL && alignment <= ISOMETRY_TOL && skipped == 0,
        format!("500 configurations, distance change {distance:.1e} m, |R v_init - v_opt| {alignment:.1e}"),
    )
}

fn criterion_7() -> Outcome {
    let (s0, v0, a0) = min_jerk_scalar(0.0);
    let (s1, v1, a1) = min_jerk_scalar(1.0);
    let (half, _, _) = min_jerk_scalar(0.5);
    let profile_ok = s0 == 0.0 && s1 == 1.0 && v0 == 0.0 && a0 == 0.0 && v1 == 0.0 && a1 == 0.0 && half == 0.5;

    let mut r = rng(7);
    let policy = TimingPolicy::default();
    let (mut boundary, mut synchronous) = (0.0_f64, true);
    for _ in 0..50 {
        let starts = [random_pose(&mut r), random_pose(&mut r)];
        let ends = [random_pose(&mut r), random_pose(&mut r)];
        let [left, right] = plan_dual(starts, ends, &policy, None).expect("valid plan");
        synchronous &= left.len() == right.len()
            && left.samples.iter().zip(&right.samples).all(|(a, b)| a.time == b.time)
            && left.samples.last().unwrap().pose == ends[0]
            && right.samples.last().unwrap().pose == ends[1];
        for traj in [&left, &right] {
            for s in [traj.samples.first().unwrap(), traj.samples.last().unwrap()] {
                boundary = boundary
                    .max(s.linear_velocity.norm())
                    .max(s.angular_velocity.norm())
                    .max(s.linear_acceleration.norm());
            }
        }
    }
    outcome(
        profile_ok && boundary <= MACHINE_ZERO && synchronous,
        format!(
            "profile endpoints exact: {profile_ok}, max boundary vel/acc {boundary:.1e}, synchronous: {synchronous}"
        ),
    )
}

/// One-axis double integrator, collaborative and force channels off.
struct TinyMpc {
    mass: f64,
    dt: f64,
    kp: f64,
    kd: f64,
    q_imp: f64,
    q_u: f64,
    u_max: f64,
    x_max: [f64; 2],
}

const TINY_N: usize = 3;

impl TinyMpc {
    fn controller(&self) -> MpcController {
        let model = InteractionModel::point_masses(1, 1, self.mass, 0.0, self.dt);
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        let gains = MpcGains {
            impedance: DMatrix::from_row_slice(1, 2, &[self.kp, self.kd]),
            collaborative_gain: one(0.0),
            collaborative_matrix: DMatrix::zeros(1, 2),
            collaborative_force_map: one(0.0),
            force_gain: one(0.5),
            force_sign: 1.0,
            q_impedance: one(self.q_imp),
            q_collaborative: one(0.0),
            q_force: one(0.0),
            q_input: one(self.q_u),
            horizon: TINY_N,
            input_limit: DVector::from_element(1, self.u_max),
            state_limit: DVector::from_row_slice(&self.x_max),
        };
        MpcController::new(model, gains).expect("valid tiny controller")
    }

    fn rollout(&self, x0: [f64; 2], u: &[f64; TINY_N]) -> Vec<[f64; 2]> {
        let mut xs = vec![x0];
        for k in 0..TINY_N {
            let [p, v] = xs[k];
            let a = u[k] / self.mass;
            xs.push([p + v * self.dt + 0.5 * a * self.dt * self.dt, v + a * self.dt]);
        }
        xs
    }

    /// Cost with the impedance channel minimized in closed form.
    fn cost(&self, x0: [f64; 2], refs: &[[f64; 2]], u: &[f64; TINY_N]) -> f64 {
        let xs = self.rollout(x0, u);
        let c = self.q_imp * self.q_u / (self.q_imp + self.q_u);
        (0..TINY_N)
            .map(|k| {
                let e = self.kp * (xs[k][0] - refs[k][0]) + self.kd * (xs[k][1] - refs[k][1]);
                c * (u[k] + e).powi(2)
            })
            .sum()
    }

    /// `G u <= h` rows: input box then state box at k = 1..N.
    fn constraints(&self, x0: [f64; 2]) -> (Vec<[f64; TINY_N]>, Vec<f64>) {
        let (mut g, mut h) = (Vec::new(), Vec::new());
        for k in 0..TINY_N {
            for sign in [1.0, -1.0] {
                let mut row = [0.0; TINY_N];
                row[k] = sign;
                g.push(row);
                h.push(self.u_max);
            }
        }
        let free = self.rollout(x0, &[0.0; TINY_N]);
        for (k, free_k) in free.iter().enumerate().skip(1) {
            for (i, free_ki) in free_k.iter().enumerate() {
                let mut row = [0.0; TINY_N];
                for (j, rj) in row.iter_mut().enumerate() {
                    let mut e = [0.0; TINY_N];
                    e[j] = 1.0;
                    *rj = self.rollout(x0, &e)[k][i] - free_ki;
                }
                for sign in [1.0, -1.0] {
                    g.push(row.map(|v| sign * v));
                    h.push(self.x_max[i] - sign * free_ki);
                }
            }
        }
        (g, h)
    }

    /// Exact optimum by enumerating active sets of size <= 3.
    fn oracle(&self, x0: [f64; 2], refs: &[[f64; 2]]) -> Option<f64> {
        let f = |u: &[f64; TINY_N]| self.cost(x0, refs, u);
        // quadratic model 0.5 u'Pu + q'u + f(0), exact for a quadratic
        let f0 = f(&[0.0; TINY_N]);
        let e = |i: usize, s: f64| {
            let mut u = [0.0; TINY_N];
            u[i] = s;
            u
        };
        let mut p = DMatrix::zeros(TINY_N, TINY_N);
        let mut q = DVector::zeros(TINY_N);
        for i in 0..TINY_N {
            q[i] = (f(&e(i, 1.0)) - f(&e(i, -1.0))) / 2.0;
            p[(i, i)] = f(&e(i, 1.0)) + f(&e(i, -1.0)) - 2.0 * f0;
        }
        for i in 0..TINY_N {
            for j in 0..i {
                let mut u = [0.0; TINY_N];
                u[i] = 1.0;
                u[j] = 1.0;
                let v = f(&u) - f0 - q[i] - q[j] - 0.5 * (p[(i, i)] + p[(j, j)]);
                p[(i, j)] = v;
                p[(j, i)] = v;
            }
        }
        let (g, h) = self.constraints(x0);
        let m = g.len();
        let mut best: Option<f64> = None;
        let mut subsets: Vec<Vec<usize>> = vec![vec![]];
        for a in 0..m {
            subsets.push(vec![a]);
            for b in a + 1..m {
                subsets.push(vec![a, b]);
                for c in b + 1..m {
                    subsets.push(vec![a, b, c]);
                }
            }
        }
        for set in subsets {
            let k = set.len();
            let mut kkt = DMatrix::zeros(TINY_N + k, TINY_N + k);
            let mut rhs = DVector::zeros(TINY_N + k);
            kkt.view_mut((0, 0), (TINY_N, TINY_N)).copy_from(&p);
            for i in 0..TINY_N {
                rhs[i] = -q[i];
            }
            for (r, &c) in set.iter().enumerate() {
                for j in 0..TINY_N {
                    kkt[(TINY_N + r, j)] = g[c][j];
                    kkt[(j, TINY_N + r)] = g[c][j];
                }
                rhs[TINY_N + r] = h[c];
            }
            let Some(sol) = kkt.lu().solve(&rhs) else { continue };
            let u = [sol[0], sol[1], sol[2]];
            let feasible = (0..m).all(|c| g[c].iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() <= h[c] + 1e-10);
            if feasible && sol.iter().all(|v| v.is_finite()) {
                let value = f(&u);
                best = Some(best.map_or(value, |b: f64| b.min(value)));
            }
        }
        best
    }

    /// Coarse grid upper bound, used as a sanity check on the enumeration.
    fn grid(&self, x0: [f64; 2], refs: &[[f64; 2]]) -> f64 {
        let (g, h) = self.constraints(x0);
        let n = 60;
        let mut best = f64::INFINITY;
        for a in 0..=n {
            for b in 0..=n {
                for c in 0..=n {
                    let u = [a, b, c].map(|i| -self.u_max + 2.0 * self.u_max * i as f64 / n as f64);
                    if (0..g.len()).all(|r| g[r].iter().zip(&u).map(|(x, y)| x * y).sum::<f64>() <= h[r]) {
                        best = best.min(self.cost(x0, refs, &u));
                    }
                }
            }
        }
        best
    }
}

fn random_qp(r: &mut ChaCha8Rng) -> QuadraticProgram {
    let n = r.random_range(2..=40);
    let rows = r.random_range(0..=n);
    let l = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
    let hessian = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
    let gradient = DVector::from_fn(n, |_, _| r.random_range(-5.0..5.0));
    let x0 = DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0));
    fn bound(r: &mut ChaCha8Rng, center: f64) -> (f64, f64) {
        match r.random_range(0..4) {
            0 => (f64::NEG_INFINITY, f64::INFINITY),
            1 => (center - r.random_range(0.0..0.5), f64::INFINITY),
            2 => (f64::NEG_INFINITY, center + r.random_range(0.0..0.5)),
            _ => (center - r.random_range(0.0..0.5), center + r.random_range(0.0..0.5)),
        }
    }
    let (lower, upper): (Vec<f64>, Vec<f64>) = x0.iter().map(|&c| bound(r, c)).unzip();
    let a = DMatrix::from_fn(rows, n, |_, _| r.random_range(-1.0..1.0));
    let ax = &a * &x0;
    let (row_lower, row_upper): (Vec<f64>, Vec<f64>) = ax.iter().map(|&c| bound(r, c)).unzip();
    QuadraticProgram {
        hessian,
        gradient,
        lower: DVector::from_vec(lower),
        upper: DVector::from_vec(upper),
        rows: a,
        row_lower: DVector::from_vec(row_lower),
        row_upper: DVector::from_vec(row_upper),
    }
}

/// Stationarity, primal feasibility, multiplier sign and complementarity.
fn kkt_residual(qp: &QuadraticProgram, s: &QpSolution) -> f64 {
    let x = &s.x;
    let stat = &qp.hessian * x + &qp.gradient - &s.lower_multipliers + &s.upper_multipliers
        - qp.rows.transpose() * (&s.row_lower_multipliers - &s.row_upper_multipliers);
    let mut worst = stat.amax();
    let ax = &qp.rows * x;
    let mut side = |value: f64, lo: f64, hi: f64, ml: f64, mu: f64| {
        worst = worst.max((lo - value).max(0.0)).max((value - hi).max(0.0)).max((-ml).max(0.0)).max((-mu).max(0.0));
        if lo.is_finite() {
            worst = worst.max((ml * (value - lo)).abs());
        } else {
            worst = worst.max(ml.abs());
        }
        if hi.is_finite() {
            worst = worst.max((mu * (hi - value)).abs());
        } else {
            worst = worst.max(mu.abs());
        }
    };
    for i in 0..x.len() {
        side(x[i], qp.lower[i], qp.upper[i], s.lower_multipliers[i], s.upper_multipliers[i]);
    }
    for i in 0..ax.len() {
        side(ax[i], qp.row_lower[i], qp.row_upper[i], s.row_lower_multipliers[i], s.row_upper_multipliers[i]);
    }
    worst
}

fn criterion_8() -> Outcome {
    let base = TinyMpc { mass: 1.0, dt: 0.1, kp: 4.0, kd: 2.0, q_imp: 1.0, q_u: 0.1, u_max: 5.0, x_max: [2.0, 1.0] };
    // free, input-saturated, velocity-limited, position-limited
    let cases = [
        (TinyMpc { ..base }, [0.1, 0.0], [0.0, 0.0]),
        (TinyMpc { u_max: 0.5, ..base }, [0.8, -0.2], [0.0, 0.0]),
        (TinyMpc { x_max: [2.0, 0.35], kp: 40.0, kd: 4.0, ..base }, [1.0, 0.3], [0.0, 0.0]),
        (TinyMpc { x_max: [0.52, 1.0], ..base }, [0.5, 0.2], [0.9, 0.0]),
    ];
    let mut gap = 0.0_f64;
    let mut grid_ok = true;
    let mut active_cases = 0;
    for (tiny, x0, target) in &cases {
        let controller = tiny.controller();
        let refs: Vec<[f64; 2]> = (0..=TINY_N).map(|_| *target).collect();
        let step = MpcStep {
            state: DVector::from_row_slice(x0),
            reference: refs.iter().map(|r| DVector::from_row_slice(r)).collect(),
            force: DVector::zeros(1),
            force_reference: DVector::zeros(1),
        };
        let horizon = controller.solve_horizon(&step).expect("tiny QP solves");
        let u: [f64; TINY_N] = std::array::from_fn(|k| horizon.steps[k].u[0]);
        if u.iter().any(|v| (v.abs() - tiny.u_max).abs() < 1e-9)
            || horizon.predicted[1..].iter().any(|x| (0..2).any(|i| (x[i].abs() - tiny.x_max[i]).abs() < 1e-9))
        {
            active_cases += 1;
        }
        let oracle = tiny.oracle(*x0, &refs).expect("oracle finds a feasible point");
        gap = gap.max((horizon.cost - oracle).abs());
        grid_ok &= oracle <= tiny.grid(*x0, &refs) + 1e-12;
    }

    let mut r = rng(8);
    let mut kkt = 0.0_f64;
    let mut reported = 0.0_f64;
    let mut solved = 0;
    for _ in 0..50 {
        let qp = random_qp(&mut r);
        if let Ok(s) = solve_qp(&qp, &QpOptions::default()) {
            solved += 1;
            kkt = kkt.max(kkt_residual(&qp, &s));
            reported = reported.max(s.kkt_residual);
        }
    }
    outcome(
        gap <= QP_ORACLE_TOL && grid_ok && active_cases >= 3 && solved == 50 && kkt < KKT_TOL && reported < KKT_TOL,
        format!(
            "N=3 objective gap {gap:.1e} ({active_cases}/4 fixtures with active limits); random QPs {solved}/50 solved, KKT residual {kkt:.1e}"
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;

    let table = fixture("table");
    let run = pipeline::run_until(&table, Stage::Simulate, Execution::Parallel).expect("table pipeline");
    let free = &run.simulation.as_ref().unwrap().summary;
    pass &= free.terminal_error < TERMINAL_ERROR && !free.diverged;
    details.push(format!("undisturbed terminal error {:.1e} m", free.terminal_error));

    let mut violation = free.max_state_violation;
    let boxed = fixture("box");
    let mut relative = Vec::new();
    for q_c in [1.0, 0.0] {
        let mut s = boxed.clone();
        s.config.controller.q_collaborative = q_c;
        s.config.simulation.duration = Some(6.0);
        let run = pipeline::run_until(&s, Stage::Simulate, Execution::Parallel).expect("box pipeline");
        let log = run.simulation.as_ref().unwrap();
        let last = log.records.last().unwrap();
        let rel_final = ((last.positions[0] - last.positions[1]) - (last.reference[0] - last.reference[1])).norm();
        violation = violation.max(log.summary.max_state_violation);
        relative.push((log.summary.rms_relative_error, rel_final));
    }
    let (on, off) = (relative[0], relative[1]);
    pass &= on.0 < off.0 && on.1 < off.1;
    details.push(format!(
        "10 N step: relative error rms {:.3e} vs {:.3e} m, final {:.3e} vs {:.3e} m (Q_C = I vs 0)",
        on.0, off.0, on.1, off.1
    ));

    let mut long = table.clone();
    long.config.simulation.duration = Some(10.0);
    let ik = pipeline::stage_ik(&long).unwrap();
    let opt = pipeline::stage_optimize(&long, &ik, Execution::Parallel).unwrap();
    let targets = pipeline::stage_posegen(&long, &opt).unwrap();
    let plan = pipeline::stage_plan(&long, &targets).unwrap();
    let start = Instant::now();
    let log = pipeline::stage_simulate(&long, &targets, &plan).unwrap();
    let elapsed = start.elapsed();
    violation = violation.max(log.summary.max_state_violation);
    pass &= log.summary.steps == 1000 && elapsed < SIM_BUDGET && violation <= STATE_VIOLATION;
    details.push(format!(
        "{} steps in {:.2} s; max state violation {violation:.1e} outside fallback",
        log.summary.steps,
        elapsed.as_secs_f64()
    ));
    outcome(pass, details.join("; "))
}

fn criterion_10() -> Outcome {
    let s = fixture("box");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        pipeline::run_pipeline(&s, d.path(), Execution::Parallel).expect("pipeline run");
    }
    let mut names: Vec<String> = std::fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| std::fs::read(dirs[0].path().join(n)).ok() != std::fs::read(dirs[1].path().join(n)).ok())
        .collect();
    outcome(
        differing.is_empty() && names.len() >= 7,
        format!("{} output files compared, differing: {differing:?}", names.len()),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("FK/IK roundtrip", criterion_1),
        ("Jacobian correctness", criterion_2),
        ("Manipulability duality", criterion_3),
        ("Ergonomics anchors", criterion_4),
        ("Postural optimization", criterion_5),
        ("Pose generation isometry", criterion_6),
        ("Minimum jerk", criterion_7),
        ("MPIC QP correctness", criterion_8),
        ("Closed-loop tracking", criterion_9),
        ("End-to-end determinism", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("{} criterion {:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
