//! Model-predictive impedance control.
//!
//! Each horizon step `k` carries four input vectors: the applied input `u_k`
//! and its impedance, collaborative and force-feedback parts `w_k`, `v_k`,
//! `s_k`. The cost
//!
//! ```text
//! sum_k |w + K_I X~|^2_QI + |v + K_col X~|^2_QC + |s + sigma F_e - K_F F~|^2_QF + |u - w - v - s|^2_Qu
//! ```
//!
//! is minimized subject to `X_{k+1} = A X_k + B u_k`, `|u| <= u_max` and
//! `|X| <= X_max`, where `X~ = X - X_ref`, `F~ = F_e - F_ref` and
//! `K_col = C_f' K_C C` maps the coordination error into input space.
//! States are eliminated, leaving a dense QP in the stacked `(u, w, v, s)`.
//! A channel whose weight matrix is zero has its variables pinned at zero.

pub mod qp;
pub mod sim;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use qp::{QpError, QpOptions, QpWorkspace, QuadraticProgram};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid controller settings: {0}")]
    InvalidGains(String),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub dt: f64,
}

/// Exact zero-order-hold discretization of `m x'' = -c x' + u` on `[x, x']`.
pub fn discretize_axis(mass: f64, damping: f64, dt: f64) -> (Matrix2<f64>, Vector2<f64>) {
    let c = damping / mass;
    let x = c * dt;
    // phi1 = (1 - e^-x)/x and phi2 = (x - 1 + e^-x)/x^2, with series near 0
    let (phi1, phi2) = if x.abs() < 1e-4 {
        (1.0 - x / 2.0 + x * x / 6.0 - x * x * x / 24.0, 0.5 - x / 6.0 + x * x / 24.0 - x * x * x / 120.0)
    } else {
        let em = (-x).exp_m1();
        (-em / x, (x + em) / (x * x))
    };
    let decay = (-x).exp();
    let a = Matrix2::new(1.0, dt * phi1, 0.0, decay);
    let b = Vector2::new(dt * dt * phi2 / mass, dt * phi1 / mass);
    (a, b)
}

impl InteractionModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, dt: f64) -> Result<Self, MpcError> {
        if a.nrows() != a.ncols() || b.nrows() != a.nrows() {
            return Err(MpcError::DimensionMismatch(format!(
                "A is {}x{}, B is {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(MpcError::InvalidGains(format!("time step must be positive, got {dt}")));
        }
        Ok(InteractionModel { a, b, dt })
    }

    /// `arms` independent point masses with `dof` axes each. State per arm is
    /// `[p; p']`, input per arm is the force.
    pub fn point_masses(arms: usize, dof: usize, mass: f64, damping: f64, dt: f64) -> Self {
        let (ad, bd) = discretize_axis(mass, damping, dt);
        let n = arms * 2 * dof;
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, arms * dof);
        for arm in 0..arms {
            for axis in 0..dof {
                let p = arm * 2 * dof + axis;
                let v = p + dof;
                a[(p, p)] = ad[(0, 0)];
                a[(p, v)] = ad[(0, 1)];
                a[(v, v)] = ad[(1, 1)];
                b[(p, arm * dof + axis)] = bd[0];
                b[(v, arm * dof + axis)] = bd[1];
            }
        }
        InteractionModel { a, b, dt }
    }

    pub fn states(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcGains {
    /// `K_I`, inputs x states.
    pub impedance: DMatrix<f64>,
    /// `K_C`, coordination space x coordination space.
    pub collaborative_gain: DMatrix<f64>,
    /// `C`, coordination space x states.
    pub collaborative_matrix: DMatrix<f64>,
    /// `C_f`, coordination space x inputs.
    pub collaborative_force_map: DMatrix<f64>,
    /// `K_F`, inputs x inputs.
    pub force_gain: DMatrix<f64>,
    /// Sign of `F_e` in the force residual.
    pub force_sign: f64,
    pub q_impedance: DMatrix<f64>,
    pub q_collaborative: DMatrix<f64>,
    pub q_force: DMatrix<f64>,
    pub q_input: DMatrix<f64>,
    pub horizon: usize,
    /// Per-input bound; `INFINITY` disables it.
    pub input_limit: DVector<f64>,
    /// Per-state bound; `INFINITY` disables it.
    pub state_limit: DVector<f64>,
}

fn is_psd(m: &DMatrix<f64>, strict: bool) -> bool {
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return false;
    }
    let eig = m.clone().symmetric_eigenvalues();
    let floor = -1e-12 * m.amax().max(1.0);
    if strict {
        eig.iter().all(|&v| v > 0.0)
    } else {
        eig.iter().all(|&v| v >= floor)
    }
}

impl MpcGains {
    pub fn collaborative_input_gain(&self) -> DMatrix<f64> {
        self.collaborative_force_map.transpose() * &self.collaborative_gain * &self.collaborative_matrix
    }

    pub fn validate(&self, model: &InteractionModel) -> Result<(), MpcError> {
        let (n, m) = (model.states(), model.inputs());
        let p = self.collaborative_gain.nrows();
        let shape = |name: &str, mat: &DMatrix<f64>, r: usize, c: usize| {
            if mat.shape() == (r, c) {
                Ok(())
            } else {
                Err(MpcError::DimensionMismatch(format!("{name} is {}x{}, expected {r}x{c}", mat.nrows(), mat.ncols())))
            }
        };
        shape("K_I", &self.impedance, m, n)?;
        shape("K_C", &self.collaborative_gain, p, p)?;
        shape("C", &self.collaborative_matrix, p, n)?;
        shape("C_f", &self.collaborative_force_map, p, m)?;
        shape("K_F", &self.force_gain, m, m)?;
        for (name, q) in
            [("Q_I", &self.q_impedance), ("Q_C", &self.q_collaborative), ("Q_F", &self.q_force), ("Q_u", &self.q_input)]
        {
            shape(name, q, m, m)?;
            if !is_psd(q, name == "Q_u") {
                let kind = if name == "Q_u" { "positive definite" } else { "symmetric positive semidefinite" };
                return Err(MpcError::InvalidGains(format!("{name} must be {kind}")));
            }
        }
        if self.horizon == 0 {
            return Err(MpcError::InvalidGains("horizon must be at least 1".into()));
        }
        if self.input_limit.len() != m || self.state_limit.len() != n {
            return Err(MpcError::DimensionMismatch("limit vectors do not match the model".into()));
        }
        if self.input_limit.iter().chain(self.state_limit.iter()).any(|v| !(*v > 0.0)) {
            return Err(MpcError::InvalidGains("limits must be positive".into()));
        }
        if !self.force_sign.is_finite() {
            return Err(MpcError::InvalidGains("force sign must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcStep {
    pub state: DVector<f64>,
    /// `X_ref[k..=k+N]`.
    pub reference: Vec<DVector<f64>>,
    pub force: DVector<f64>,
    pub force_reference: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcQp {
    pub qp: QuadraticProgram,
    /// Cost = `qp.objective(z) + constant`.
    pub constant: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub v: Vec<f64>,
    pub s: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonSolution {
    pub steps: Vec<Decomposition>,
    /// Predicted `X_0..=X_N`.
    pub predicted: Vec<DVector<f64>>,
    pub cost: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlOutput {
    pub u: Vec<f64>,
    pub decomposition: Decomposition,
    /// The QP failed and the saturated impedance law was applied instead.
    pub fallback: bool,
    pub saturated: bool,
    pub cost: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
}

const CHANNELS: usize = 4;

/// Horizon structure that does not depend on the measured state.
#[derive(Clone, Debug)]
pub struct MpcController {
    model: InteractionModel,
    gains: MpcGains,
    collab: DMatrix<f64>,
    /// `Phi_k = A^k`, k = 0..=N.
    phi: Vec<DMatrix<f64>>,
    /// `X_k = Phi_k X_0 + Gamma_k z`, k = 0..=N.
    gamma: Vec<DMatrix<f64>>,
    e_imp: Vec<DMatrix<f64>>,
    e_col: Vec<DMatrix<f64>>,
    hessian: DMatrix<f64>,
    /// Stacked `Gamma_k` rows of the bounded states, k = 1..=N.
    state_rows: DMatrix<f64>,
    state_row_index: Vec<(usize, usize)>,
    pinned: Vec<bool>,
    workspace: QpWorkspace,
    pub qp_options: QpOptions,
}

impl MpcController {
    pub fn new(model: InteractionModel, gains: MpcGains) -> Result<Self, MpcError> {
        gains.validate(&model)?;
        let (n, m, horizon) = (model.states(), model.inputs(), gains.horizon);
        let nz = horizon * CHANNELS * m;
        let select = |k: usize, channel: usize| {
            let mut s = DMatrix::zeros(m, nz);
            for i in 0..m {
                s[(i, k * CHANNELS * m + channel * m + i)] = 1.0;
            }
            s
        };
        let collab = gains.collaborative_input_gain();

        let mut phi = vec![DMatrix::identity(n, n)];
        let mut gamma = vec![DMatrix::zeros(n, nz)];
        for k in 0..horizon {
            phi.push(&model.a * &phi[k]);
            gamma.push(&model.a * &gamma[k] + &model.b * select(k, 0));
        }

        let mut hessian = DMatrix::zeros(nz, nz);
        let mut e_imp = Vec::with_capacity(horizon);
        let mut e_col = Vec::with_capacity(horizon);
        for (k, gamma_k) in gamma.iter().enumerate().take(horizon) {
            let ei = select(k, 1) + &gains.impedance * gamma_k;
            let ec = select(k, 2) + &collab * gamma_k;
            let es = select(k, 3);
            let eu = select(k, 0) - select(k, 1) - select(k, 2) - select(k, 3);
            for (e, q) in
                [(&ei, &gains.q_impedance), (&ec, &gains.q_collaborative), (&es, &gains.q_force), (&eu, &gains.q_input)]
            {
                hessian += e.transpose() * (q * e) * 2.0;
            }
            e_imp.push(ei);
            e_col.push(ec);
        }
        hessian = (&hessian + hessian.transpose()) * 0.5;

        let mut pinned = vec![false; nz];
        for (channel, q) in [(1, &gains.q_impedance), (2, &gains.q_collaborative), (3, &gains.q_force)] {
            if q.iter().all(|v| *v == 0.0) {
                for k in 0..horizon {
                    for i in 0..m {
                        pinned[k * CHANNELS * m + channel * m + i] = true;
                    }
                }
            }
        }

        let state_row_index: Vec<(usize, usize)> = (1..=horizon)
            .flat_map(|k| (0..n).filter(|&i| gains.state_limit[i].is_finite()).map(move |i| (k, i)))
            .collect();
        let mut state_rows = DMatrix::zeros(state_row_index.len(), nz);
        for (r, &(k, i)) in state_row_index.iter().enumerate() {
            state_rows.set_row(r, &gamma[k].row(i));
        }

        let workspace = QpWorkspace::new(&hessian, &state_rows, &pinned)?;
        Ok(MpcController {
            model,
            gains,
            collab,
            phi,
            gamma,
            e_imp,
            e_col,
            hessian,
            state_rows,
            state_row_index,
            pinned,
            workspace,
            qp_options: QpOptions::default(),
        })
    }

    pub fn model(&self) -> &InteractionModel {
        &self.model
    }

    pub fn gains(&self) -> &MpcGains {
        &self.gains
    }

    fn check_step(&self, step: &MpcStep) -> Result<(), MpcError> {
        let (n, m) = (self.model.states(), self.model.inputs());
        if step.state.len() != n || step.force.len() != m || step.force_reference.len() != m {
            return Err(MpcError::DimensionMismatch("state or force vector has the wrong length".into()));
        }
        if step.reference.len() != self.gains.horizon + 1 {
            return Err(MpcError::DimensionMismatch(format!(
                "reference window has {} entries, expected {}",
                step.reference.len(),
                self.gains.horizon + 1
            )));
        }
        if step.reference.iter().any(|r| r.len() != n) {
            return Err(MpcError::DimensionMismatch("reference state has the wrong length".into()));
        }
        Ok(())
    }

    /// Gradient, constant and bounds of the QP for one measured step.
    fn qp_data(&self, step: &MpcStep) -> MpcQp {
        let g = &self.gains;
        let (m, horizon) = (self.model.inputs(), g.horizon);
        let nz = self.hessian.nrows();
        let mut gradient = DVector::zeros(nz);
        let mut constant = 0.0;
        let force_residual = &step.force * g.force_sign - &g.force_gain * (&step.force - &step.force_reference);
        let qf_e = &g.q_force * &force_residual;
        for k in 0..horizon {
            let tracking = &self.phi[k] * &step.state - &step.reference[k];
            let ei = &g.impedance * &tracking;
            let ec = &self.collab * &tracking;
            let qi_e = &g.q_impedance * &ei;
            let qc_e = &g.q_collaborative * &ec;
            gradient += (self.e_imp[k].transpose() * &qi_e + self.e_col[k].transpose() * &qc_e) * 2.0;
            let s0 = k * CHANNELS * m + 3 * m;
            for i in 0..m {
                gradient[s0 + i] += 2.0 * qf_e[i];
            }
            constant += ei.dot(&qi_e) + ec.dot(&qc_e) + force_residual.dot(&qf_e);
        }

        let mut lower = DVector::from_element(nz, f64::NEG_INFINITY);
        let mut upper = DVector::from_element(nz, f64::INFINITY);
        for k in 0..horizon {
            for i in 0..m {
                let idx = k * CHANNELS * m + i;
                lower[idx] = -g.input_limit[i];
                upper[idx] = g.input_limit[i];
            }
        }
        for (i, &p) in self.pinned.iter().enumerate() {
            if p {
                lower[i] = 0.0;
                upper[i] = 0.0;
            }
        }
        let rows = self.state_row_index.len();
        let mut row_lower = DVector::zeros(rows);
        let mut row_upper = DVector::zeros(rows);
        for (r, &(k, i)) in self.state_row_index.iter().enumerate() {
            let free = self.phi[k].row(i).dot(&step.state.transpose());
            row_lower[r] = -g.state_limit[i] - free;
            row_upper[r] = g.state_limit[i] - free;
        }
        MpcQp {
            qp: QuadraticProgram {
                hessian: self.hessian.clone(),
                gradient,
                lower,
                upper,
                rows: self.state_rows.clone(),
                row_lower,
                row_upper,
            },
            constant,
        }
    }

    pub fn build_qp(&self, step: &MpcStep) -> Result<MpcQp, MpcError> {
        self.check_step(step)?;
        Ok(self.qp_data(step))
    }

    pub fn solve_horizon(&self, step: &MpcStep) -> Result<HorizonSolution, MpcError> {
        self.check_step(step)?;
        let data = self.qp_data(step);
        let q = &data.qp;
        let sol =
            self.workspace.solve(&q.gradient, &q.lower, &q.upper, &q.row_lower, &q.row_upper, &self.qp_options)?;
        let m = self.model.inputs();
        let block = |k: usize, c: usize| sol.x.rows(k * CHANNELS * m + c * m, m).iter().copied().collect::<Vec<_>>();
        let steps = (0..self.gains.horizon)
            .map(|k| Decomposition { u: block(k, 0), w: block(k, 1), v: block(k, 2), s: block(k, 3) })
            .collect();
        let predicted =
            (0..=self.gains.horizon).map(|k| &self.phi[k] * &step.state + &self.gamma[k] * &sol.x).collect();
        Ok(HorizonSolution {
            steps,
            predicted,
            cost: (sol.objective + data.constant).max(0.0),
            kkt_residual: sol.kkt_residual,
            iterations: sol.iterations,
        })
    }

    /// Saturated `u = -K_I X~_0`, used when the QP cannot be solved.
    pub fn fallback_input(&self, step: &MpcStep) -> Vec<f64> {
        let u = -(&self.gains.impedance * (&step.state - &step.reference[0]));
        u.iter().zip(self.gains.input_limit.iter()).map(|(v, l)| v.clamp(-l, *l)).collect()
    }

    pub fn control_step(&self, step: &MpcStep) -> Result<ControlOutput, MpcError> {
        let saturated =
            |u: &[f64]| u.iter().zip(self.gains.input_limit.iter()).any(|(v, l)| v.abs() >= l - 1e-9 * l.max(1.0));
        match self.solve_horizon(step) {
            Ok(h) => {
                let first = h.steps[0].clone();
                Ok(ControlOutput {
                    u: first.u.clone(),
                    saturated: saturated(&first.u),
                    decomposition: first,
                    fallback: false,
                    cost: h.cost,
                    kkt_residual: h.kkt_residual,
                    iterations: h.iterations,
                })
            }
            Err(MpcError::Qp(QpError::Infeasible { .. } | QpError::MaxIterations { .. })) => {
                let u = self.fallback_input(step);
                let m = u.len();
                Ok(ControlOutput {
                    saturated: saturated(&u),
                    decomposition: Decomposition { u: u.clone(), w: u.clone(), v: vec![0.0; m], s: vec![0.0; m] },
                    u,
                    fallback: true,
                    cost: f64::NAN,
                    kkt_residual: f64::NAN,
                    iterations: 0,
                })
            }
            Err(e) => Err(e),
        }
    }
}

pub fn build_qp(step: &MpcStep, model: &InteractionModel, gains: &MpcGains) -> Result<MpcQp, MpcError> {
    MpcController::new(model.clone(), gains.clone())?.build_qp(step)
}

pub fn control_step(step: &MpcStep, model: &InteractionModel, gains: &MpcGains) -> Result<ControlOutput, MpcError> {
    MpcController::new(model.clone(), gains.clone())?.control_step(step)
}

/// Scalar settings of the two-arm controller. Every weight is a multiple of
/// the identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub dt: f64,
    pub horizon: usize,
    /// Virtual mass of each arm in the prediction model, kg.
    pub arm_mass: f64,
    pub arm_damping: f64,
    pub stiffness: f64,
    pub damping: f64,
    pub collaborative_gain: f64,
    pub force_gain: f64,
    pub force_sign: f64,
    pub q_impedance: f64,
    pub q_collaborative: f64,
    pub q_force: f64,
    pub q_input: f64,
    pub input_limit: f64,
    pub position_limit: f64,
    pub velocity_limit: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            dt: 0.01,
            horizon: 20,
            arm_mass: 2.0,
            arm_damping: 0.0,
            stiffness: 400.0,
            damping: 40.0,
            collaborative_gain: 200.0,
            force_gain: 0.5,
            force_sign: 1.0,
            q_impedance: 1.0,
            q_collaborative: 1.0,
            q_force: 0.1,
            q_input: 0.01,
            input_limit: 150.0,
            position_limit: 2.0,
            velocity_limit: 1.0,
        }
    }
}

/// Dual-arm state `[p_l, p_l', p_r, p_r']` and input `[u_l, u_r]`.
pub const DUAL_STATES: usize = 12;
pub const DUAL_INPUTS: usize = 6;

impl ControllerConfig {
    pub fn model(&self) -> InteractionModel {
        InteractionModel::point_masses(2, 3, self.arm_mass, self.arm_damping, self.dt)
    }

    pub fn gains(&self) -> MpcGains {
        let eye3 = DMatrix::<f64>::identity(3, 3);
        let mut impedance = DMatrix::zeros(DUAL_INPUTS, DUAL_STATES);
        let mut c = DMatrix::zeros(3, DUAL_STATES);
        let mut cf = DMatrix::zeros(3, DUAL_INPUTS);
        for arm in 0..2 {
            let sign = if arm == 0 { 1.0 } else { -1.0 };
            impedance.view_mut((3 * arm, 6 * arm), (3, 3)).copy_from(&(&eye3 * self.stiffness));
            impedance.view_mut((3 * arm, 6 * arm + 3), (3, 3)).copy_from(&(&eye3 * self.damping));
            c.view_mut((0, 6 * arm), (3, 3)).copy_from(&(&eye3 * sign));
            cf.view_mut((0, 3 * arm), (3, 3)).copy_from(&(&eye3 * sign));
        }
        let state_limit =
            DVector::from_fn(DUAL_STATES, |i, _| if i % 6 < 3 { self.position_limit } else { self.velocity_limit });
        let eye = |w: f64| DMatrix::identity(DUAL_INPUTS, DUAL_INPUTS) * w;
        MpcGains {
            impedance,
            collaborative_gain: &eye3 * self.collaborative_gain,
            collaborative_matrix: c,
            collaborative_force_map: cf,
            force_gain: eye(self.force_gain),
            force_sign: self.force_sign,
            q_impedance: eye(self.q_impedance),
            q_collaborative: eye(self.q_collaborative),
            q_force: eye(self.q_force),
            q_input: eye(self.q_input),
            horizon: self.horizon,
            input_limit: DVector::from_element(DUAL_INPUTS, self.input_limit),
            state_limit,
        }
    }

    pub fn controller(&self) -> Result<MpcController, MpcError> {
        MpcController::new(self.model(), self.gains())
    }
}
