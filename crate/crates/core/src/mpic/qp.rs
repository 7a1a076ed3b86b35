//! Dense convex QP solver.
//!
//! Solves
//!
//! ```text
//! minimize   1/2 x' H x + g' x
//! subject to lower <= x <= upper
//!            row_lower <= A x <= row_upper
//! ```
//!
//! with `H` positive definite on the variables that are not fixed
//! (`lower[i] == upper[i]`). Fixed variables are substituted out. The rest is
//! the dual active-set method of Goldfarb and Idnani: start from the
//! unconstrained minimizer, repeatedly add the most violated constraint, and
//! keep the factorization `J' H J = I`, `J' N_active = [R; 0]` current with
//! Givens rotations.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum ConstraintRef {
    Lower(usize),
    Upper(usize),
    RowLower(usize),
    RowUpper(usize),
}

impl fmt::Display for ConstraintRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintRef::Lower(i) => write!(f, "lower bound of x[{i}]"),
            ConstraintRef::Upper(i) => write!(f, "upper bound of x[{i}]"),
            ConstraintRef::RowLower(i) => write!(f, "lower side of row {i}"),
            ConstraintRef::RowUpper(i) => write!(f, "upper side of row {i}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("hessian is not positive definite on the free variables")]
    NotConvex,
    #[error("constraints are infeasible ({constraint} cannot be satisfied)")]
    Infeasible { constraint: ConstraintRef },
    #[error("no convergence after {iterations} iterations")]
    MaxIterations { iterations: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticProgram {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub rows: DMatrix<f64>,
    pub row_lower: DVector<f64>,
    pub row_upper: DVector<f64>,
}

impl QuadraticProgram {
    /// Problem with no constraints.
    pub fn unconstrained(hessian: DMatrix<f64>, gradient: DVector<f64>) -> Self {
        let n = gradient.len();
        QuadraticProgram {
            hessian,
            gradient,
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
            rows: DMatrix::zeros(0, n),
            row_lower: DVector::zeros(0),
            row_upper: DVector::zeros(0),
        }
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.gradient.dot(x)
    }

    pub fn fixed_mask(&self) -> Vec<bool> {
        self.lower.iter().zip(self.upper.iter()).map(|(l, u)| l == u).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QpOptions {
    /// Zero picks `10 (n + constraints) + 100`.
    pub max_iterations: usize,
    /// Violations below this (scaled by the constraint normal) are ignored.
    pub feasibility_tolerance: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions { max_iterations: 0, feasibility_tolerance: 1e-11 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// Multipliers, all `>= 0`. Fixed variables report their reaction here.
    pub lower_multipliers: DVector<f64>,
    pub upper_multipliers: DVector<f64>,
    pub row_lower_multipliers: DVector<f64>,
    pub row_upper_multipliers: DVector<f64>,
    pub active: Vec<ConstraintRef>,
    pub iterations: usize,
    /// Max of stationarity, primal violation, dual sign and complementarity errors.
    pub kkt_residual: f64,
}

#[derive(Clone, Copy, Debug)]
enum Normal {
    Bound { var: usize },
    Row { row: usize },
}

#[derive(Clone, Copy, Debug)]
struct Inequality {
    normal: Normal,
    sign: f64,
    rhs: f64,
    norm: f64,
    origin: ConstraintRef,
}

/// Factorization of one QP structure, reusable for different gradients and bounds.
#[derive(Clone, Debug)]
pub struct QpWorkspace {
    hessian: DMatrix<f64>,
    rows: DMatrix<f64>,
    free: Vec<usize>,
    fixed: Vec<usize>,
    h_free_fixed: DMatrix<f64>,
    rows_free: DMatrix<f64>,
    rows_fixed: DMatrix<f64>,
    row_norms: Vec<f64>,
    j0: DMatrix<f64>,
}

impl QpWorkspace {
    pub fn new(hessian: &DMatrix<f64>, rows: &DMatrix<f64>, fixed: &[bool]) -> Result<Self, QpError> {
        let n = hessian.nrows();
        if hessian.ncols() != n || fixed.len() != n || rows.ncols() != n {
            return Err(QpError::DimensionMismatch(format!(
                "hessian {}x{}, rows {}x{}, fixed mask {}",
                hessian.nrows(),
                hessian.ncols(),
                rows.nrows(),
                rows.ncols(),
                fixed.len()
            )));
        }
        let free: Vec<usize> = (0..n).filter(|&i| !fixed[i]).collect();
        let fixed: Vec<usize> = (0..n).filter(|&i| fixed[i]).collect();
        let h_ff = hessian.select_rows(&free).select_columns(&free);
        let h_free_fixed = hessian.select_rows(&free).select_columns(&fixed);
        let rows_free = rows.select_columns(&free);
        let rows_fixed = rows.select_columns(&fixed);
        let row_norms = rows_free.row_iter().map(|r| r.norm()).collect();
        let j0 = if free.is_empty() {
            DMatrix::zeros(0, 0)
        } else {
            let chol = h_ff.cholesky().ok_or(QpError::NotConvex)?;
            let l_inv = chol
                .l()
                .solve_lower_triangular(&DMatrix::identity(free.len(), free.len()))
                .ok_or(QpError::NotConvex)?;
            if l_inv.iter().any(|v| !v.is_finite()) {
                return Err(QpError::NotConvex);
            }
            l_inv.transpose()
        };
        Ok(QpWorkspace {
            hessian: hessian.clone(),
            rows: rows.clone(),
            free,
            fixed,
            h_free_fixed,
            rows_free,
            rows_fixed,
            row_norms,
            j0,
        })
    }

    pub fn dimension(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn solve(
        &self,
        gradient: &DVector<f64>,
        lower: &DVector<f64>,
        upper: &DVector<f64>,
        row_lower: &DVector<f64>,
        row_upper: &DVector<f64>,
        opts: &QpOptions,
    ) -> Result<QpSolution, QpError> {
        let n = self.dimension();
        let m = self.rows.nrows();
        if gradient.len() != n || lower.len() != n || upper.len() != n || row_lower.len() != m || row_upper.len() != m {
            return Err(QpError::DimensionMismatch("vector lengths do not match the workspace".into()));
        }
        for &i in &self.fixed {
            if lower[i] != upper[i] {
                return Err(QpError::DimensionMismatch(format!(
                    "x[{i}] was prepared as fixed but has distinct bounds"
                )));
            }
        }
        for i in 0..n {
            if lower[i] > upper[i] {
                return Err(QpError::Infeasible { constraint: ConstraintRef::Lower(i) });
            }
        }
        let x_fixed = DVector::from_iterator(self.fixed.len(), self.fixed.iter().map(|&i| lower[i]));
        let shift = &self.rows_fixed * &x_fixed;
        let g_free = DVector::from_iterator(self.free.len(), self.free.iter().map(|&i| gradient[i]))
            + &self.h_free_fixed * &x_fixed;

        let mut cons = Vec::new();
        for (k, &i) in self.free.iter().enumerate() {
            if lower[i].is_finite() {
                cons.push(Inequality {
                    normal: Normal::Bound { var: k },
                    sign: 1.0,
                    rhs: lower[i],
                    norm: 1.0,
                    origin: ConstraintRef::Lower(i),
                });
            }
            if upper[i].is_finite() {
                cons.push(Inequality {
                    normal: Normal::Bound { var: k },
                    sign: -1.0,
                    rhs: -upper[i],
                    norm: 1.0,
                    origin: ConstraintRef::Upper(i),
                });
            }
        }
        for r in 0..m {
            let (lo, hi) = (row_lower[r] - shift[r], row_upper[r] - shift[r]);
            if lo > hi {
                return Err(QpError::Infeasible { constraint: ConstraintRef::RowLower(r) });
            }
            let norm = self.row_norms[r];
            if norm == 0.0 {
                // no free variable in this row: only the fixed part matters
                if lo > 0.0 {
                    return Err(QpError::Infeasible { constraint: ConstraintRef::RowLower(r) });
                }
                if hi < 0.0 {
                    return Err(QpError::Infeasible { constraint: ConstraintRef::RowUpper(r) });
                }
                continue;
            }
            if lo.is_finite() {
                cons.push(Inequality {
                    normal: Normal::Row { row: r },
                    sign: 1.0,
                    rhs: lo,
                    norm,
                    origin: ConstraintRef::RowLower(r),
                });
            }
            if hi.is_finite() {
                cons.push(Inequality {
                    normal: Normal::Row { row: r },
                    sign: -1.0,
                    rhs: -hi,
                    norm,
                    origin: ConstraintRef::RowUpper(r),
                });
            }
        }

        let max_iterations =
            if opts.max_iterations == 0 { 10 * (self.free.len() + cons.len()) + 100 } else { opts.max_iterations };
        let (y, active, multipliers, iterations) =
            dual_active_set(&self.j0, &g_free, &self.rows_free, &cons, opts.feasibility_tolerance, max_iterations)?;

        let mut x = lower.clone();
        for (k, &i) in self.free.iter().enumerate() {
            x[i] = y[k];
        }
        let mut lower_mult = DVector::zeros(n);
        let mut upper_mult = DVector::zeros(n);
        let mut row_lower_mult = DVector::zeros(m);
        let mut row_upper_mult = DVector::zeros(m);
        let mut active_refs = Vec::with_capacity(active.len());
        for (&c, &lambda) in active.iter().zip(&multipliers) {
            let origin = cons[c].origin;
            active_refs.push(origin);
            match origin {
                ConstraintRef::Lower(i) => lower_mult[i] += lambda,
                ConstraintRef::Upper(i) => upper_mult[i] += lambda,
                ConstraintRef::RowLower(r) => row_lower_mult[r] += lambda,
                ConstraintRef::RowUpper(r) => row_upper_mult[r] += lambda,
            }
        }
        // reactions of fixed variables close the stationarity condition
        let mut residual = &self.hessian * &x + gradient - self.rows.transpose() * (&row_lower_mult - &row_upper_mult);
        for &i in &self.fixed {
            let reaction = residual[i];
            if reaction >= 0.0 {
                lower_mult[i] = reaction;
            } else {
                upper_mult[i] = -reaction;
            }
        }
        residual -= &lower_mult - &upper_mult;

        let ax = &self.rows * &x;
        let mut kkt = residual.amax();
        for i in 0..n {
            if self.fixed.contains(&i) {
                continue;
            }
            kkt = kkt.max(lower[i] - x[i]).max(x[i] - upper[i]);
            if lower[i].is_finite() {
                kkt = kkt.max((lower_mult[i] * (x[i] - lower[i])).abs());
            }
            if upper[i].is_finite() {
                kkt = kkt.max((upper_mult[i] * (upper[i] - x[i])).abs());
            }
        }
        for r in 0..m {
            kkt = kkt.max(row_lower[r] - ax[r]).max(ax[r] - row_upper[r]);
            if row_lower[r].is_finite() {
                kkt = kkt.max((row_lower_mult[r] * (ax[r] - row_lower[r])).abs());
            }
            if row_upper[r].is_finite() {
                kkt = kkt.max((row_upper_mult[r] * (row_upper[r] - ax[r])).abs());
            }
        }
        let objective = 0.5 * x.dot(&(&self.hessian * &x)) + gradient.dot(&x);
        Ok(QpSolution {
            x,
            objective,
            lower_multipliers: lower_mult,
            upper_multipliers: upper_mult,
            row_lower_multipliers: row_lower_mult,
            row_upper_multipliers: row_upper_mult,
            active: active_refs,
            iterations,
            kkt_residual: kkt,
        })
    }
}

pub fn solve_qp(qp: &QuadraticProgram, opts: &QpOptions) -> Result<QpSolution, QpError> {
    let n = qp.gradient.len();
    if qp.lower.len() != n || qp.upper.len() != n {
        return Err(QpError::DimensionMismatch(format!(
            "{} variables but bounds of length {}/{}",
            n,
            qp.lower.len(),
            qp.upper.len()
        )));
    }
    if qp.row_lower.len() != qp.rows.nrows() || qp.row_upper.len() != qp.rows.nrows() {
        return Err(QpError::DimensionMismatch("row bounds do not match the constraint rows".into()));
    }
    let ws = QpWorkspace::new(&qp.hessian, &qp.rows, &qp.fixed_mask())?;
    ws.solve(&qp.gradient, &qp.lower, &qp.upper, &qp.row_lower, &qp.row_upper, opts)
}

fn dense_normal(c: &Inequality, rows: &DMatrix<f64>, n: usize) -> DVector<f64> {
    match c.normal {
        Normal::Bound { var } => {
            let mut v = DVector::zeros(n);
            v[var] = c.sign;
            v
        }
        Normal::Row { row } => rows.row(row).transpose() * c.sign,
    }
}

fn slack(c: &Inequality, y: &DVector<f64>, ay: &DVector<f64>) -> f64 {
    let value = match c.normal {
        Normal::Bound { var } => y[var],
        Normal::Row { row } => ay[row],
    };
    c.sign * value - c.rhs
}

type ActiveSetResult = (DVector<f64>, Vec<usize>, Vec<f64>, usize);

/// Core iteration on the free variables. Returns the solution, active
/// constraint indices with their multipliers, and the iteration count.
fn dual_active_set(
    j0: &DMatrix<f64>,
    c: &DVector<f64>,
    rows: &DMatrix<f64>,
    cons: &[Inequality],
    tol: f64,
    max_iterations: usize,
) -> Result<ActiveSetResult, QpError> {
    let n = c.len();
    let mut j = j0.clone();
    let mut r = DMatrix::<f64>::zeros(n, n);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut is_active = vec![false; cons.len()];
    let mut y = -(&j * (j.transpose() * c));
    let mut iterations = 0;

    loop {
        let ay = rows * &y;
        let mut worst: Option<(usize, f64)> = None;
        for (k, con) in cons.iter().enumerate() {
            if is_active[k] {
                continue;
            }
            let s = slack(con, &y, &ay) / con.norm;
            if s < -tol * (1.0 + (con.rhs / con.norm).abs()) && worst.is_none_or(|(_, w)| s < w) {
                worst = Some((k, s));
            }
        }
        let Some((p, _)) = worst else {
            return Ok((y, active, u, iterations));
        };
        let np = dense_normal(&cons[p], rows, n);
        let mut u_plus = u.clone();
        u_plus.push(0.0);

        loop {
            iterations += 1;
            if iterations > max_iterations {
                return Err(QpError::MaxIterations { iterations: max_iterations });
            }
            let q = active.len();
            let d = j.transpose() * &np;
            let z = j.columns(q, n - q) * d.rows(q, n - q);
            let mut rv = DVector::zeros(q);
            for i in (0..q).rev() {
                let mut acc = d[i];
                for k in i + 1..q {
                    acc -= r[(i, k)] * rv[k];
                }
                rv[i] = acc / r[(i, i)];
            }

            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for k in 0..q {
                if rv[k] > 0.0 {
                    let t = u_plus[k] / rv[k];
                    if t < t1 {
                        t1 = t;
                        drop = Some(k);
                    }
                }
            }
            let zn = z.dot(&np);
            let sp = np.dot(&y) - cons[p].rhs;
            let t2 = if zn <= 1e-20 * d.norm_squared() { f64::INFINITY } else { -sp / zn };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible { constraint: cons[p].origin });
            }

            if t2.is_finite() {
                y += &z * t;
            }
            for k in 0..q {
                u_plus[k] -= t * rv[k];
            }
            u_plus[q] += t;

            if t2.is_finite() && t2 <= t1 {
                add_constraint(&mut j, &mut r, q, d);
                active.push(p);
                is_active[p] = true;
                u = u_plus;
                break;
            }
            let l = drop.expect("partial step has a blocking constraint");
            is_active[active[l]] = false;
            active.remove(l);
            u_plus.remove(l);
            drop_constraint(&mut j, &mut r, q, l);
        }
    }
}

fn rotate_columns(j: &mut DMatrix<f64>, a: usize, b: usize, c: f64, s: f64) {
    for row in 0..j.nrows() {
        let (x1, x2) = (j[(row, a)], j[(row, b)]);
        j[(row, a)] = c * x1 + s * x2;
        j[(row, b)] = -s * x1 + c * x2;
    }
}

fn add_constraint(j: &mut DMatrix<f64>, r: &mut DMatrix<f64>, q: usize, mut d: DVector<f64>) {
    let n = d.len();
    for i in (q + 1..n).rev() {
        let (a, b) = (d[i - 1], d[i]);
        if b == 0.0 {
            continue;
        }
        let h = a.hypot(b);
        let (c, s) = (a / h, b / h);
        d[i - 1] = h;
        d[i] = 0.0;
        rotate_columns(j, i - 1, i, c, s);
    }
    for i in 0..=q {
        r[(i, q)] = d[i];
    }
}

fn drop_constraint(j: &mut DMatrix<f64>, r: &mut DMatrix<f64>, q: usize, l: usize) {
    for col in l..q - 1 {
        for row in 0..q {
            r[(row, col)] = r[(row, col + 1)];
        }
    }
    for row in 0..q {
        r[(row, q - 1)] = 0.0;
    }
    for k in l..q - 1 {
        let (a, b) = (r[(k, k)], r[(k + 1, k)]);
        if b == 0.0 {
            continue;
        }
        let h = a.hypot(b);
        let (c, s) = (a / h, b / h);
        for col in k..q - 1 {
            let (x1, x2) = (r[(k, col)], r[(k + 1, col)]);
            r[(k, col)] = c * x1 + s * x2;
            r[(k + 1, col)] = -s * x1 + c * x2;
        }
        r[(k + 1, k)] = 0.0;
        rotate_columns(j, k, k + 1, c, s);
    }
}
