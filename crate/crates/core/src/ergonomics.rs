//! Continuous upper-limb ergonomic scoring.
//!
//! REBA assigns integer scores to joint-angle bands. Here every band table is
//! replaced by a continuous piecewise-linear curve through the band anchors:
//!
//! * shoulder flexion `q2`: `(0,0) (2pi/9,1) (pi/4,2) (pi/2,3) (pi,4)`, and
//!   on the extension side `(-2pi/9,1) (-pi/3,2)`
//! * shoulder abduction `|q1|` ramps from 0 to 1 over `[pi/6, pi/3]`
//! * shoulder rotation `|q3|` ramps from 0 to 1 over `[pi/4, pi/2]`
//! * elbow flexion angle `q4 + pi/2`: score 1 on the 60-100 deg band, rising
//!   to 2 at full extension and at 150 deg
//!
//! Per-arm scores add shoulder and elbow; the bimanual score is the worse arm.
//! Load adjustments are constant within a task and left out.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::skeleton::ArmState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extrapolation {
    /// Continue the outermost segment.
    Linear,
    /// Hold the outermost value.
    Clamp,
}

/// Continuous piecewise-linear curve through sorted anchor points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    knots: Vec<(f64, f64)>,
    extrapolation: Extrapolation,
}

fn softplus(t: f64, sharpness: f64) -> f64 {
    t.max(0.0) + (-sharpness * t.abs()).exp().ln_1p() / sharpness
}

fn logistic(t: f64, sharpness: f64) -> f64 {
    let z = sharpness * t;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl PiecewiseLinear {
    /// Panics unless there are at least two anchors with strictly increasing abscissae.
    pub fn new(knots: Vec<(f64, f64)>, extrapolation: Extrapolation) -> Self {
        assert!(knots.len() >= 2, "need at least two anchors");
        assert!(knots.windows(2).all(|w| w[0].0 < w[1].0), "anchors must be strictly increasing");
        PiecewiseLinear { knots, extrapolation }
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    fn segment_slope(&self, i: usize) -> f64 {
        let (x0, y0) = self.knots[i];
        let (x1, y1) = self.knots[i + 1];
        (y1 - y0) / (x1 - x0)
    }

    fn outer_slopes(&self) -> (f64, f64) {
        match self.extrapolation {
            Extrapolation::Linear => (self.segment_slope(0), self.segment_slope(self.knots.len() - 2)),
            Extrapolation::Clamp => (0.0, 0.0),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.knots.len();
        let (first, last) = (self.knots[0], self.knots[n - 1]);
        let (left, right) = self.outer_slopes();
        if x <= first.0 {
            return first.1 + left * (x - first.0);
        }
        if x >= last.0 {
            return last.1 + right * (x - last.0);
        }
        let i = self.knots.partition_point(|k| k.0 <= x) - 1;
        let (x0, y0) = self.knots[i];
        let (x1, y1) = self.knots[i + 1];
        y0 + (x - x0) / (x1 - x0) * (y1 - y0)
    }

    /// Slope at `x`; at an anchor the slope of the segment to its right.
    pub fn slope(&self, x: f64) -> f64 {
        let n = self.knots.len();
        let (left, right) = self.outer_slopes();
        if x < self.knots[0].0 {
            return left;
        }
        if x >= self.knots[n - 1].0 {
            return right;
        }
        let i = self.knots.partition_point(|k| k.0 <= x) - 1;
        self.segment_slope(i)
    }

    /// Slope changes at each anchor.
    fn kinks(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let n = self.knots.len();
        let (left, right) = self.outer_slopes();
        (0..n).map(move |i| {
            let before = if i == 0 { left } else { self.segment_slope(i - 1) };
            let after = if i == n - 1 { right } else { self.segment_slope(i) };
            (self.knots[i].0, after - before)
        })
    }

    /// Softplus-smoothed curve: every kink `max(t,0)` is replaced by
    /// `log(1 + exp(k t)) / k`. Returns value and derivative.
    pub fn eval_smooth(&self, x: f64, sharpness: f64) -> (f64, f64) {
        let (x0, y0) = self.knots[0];
        let (left, _) = self.outer_slopes();
        let mut value = y0 + left * (x - x0);
        let mut slope = left;
        for (xk, jump) in self.kinks() {
            value += jump * softplus(x - xk, sharpness);
            slope += jump * logistic(x - xk, sharpness);
        }
        (value, slope)
    }
}

/// Shoulder, elbow and total score of one arm.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmScore {
    pub shoulder: f64,
    pub elbow: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErgonomicScore {
    pub left: ArmScore,
    pub right: ArmScore,
    /// `max(left.total, right.total)`.
    pub overall: f64,
}

/// Score curves. `elbow` is indexed by elbow flexion angle `q4 + pi/2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErgonomicModel {
    pub flexion: PiecewiseLinear,
    pub abduction: PiecewiseLinear,
    pub rotation: PiecewiseLinear,
    pub elbow: PiecewiseLinear,
}

/// Offset between the `q4` joint angle and the anatomical elbow flexion angle.
pub const ELBOW_FLEXION_OFFSET: f64 = PI / 2.0;

fn symmetric_ramp(start: f64, end: f64) -> PiecewiseLinear {
    PiecewiseLinear::new(vec![(-end, 1.0), (-start, 0.0), (start, 0.0), (end, 1.0)], Extrapolation::Clamp)
}

pub fn default_elbow_anchors() -> Vec<(f64, f64)> {
    [(0.0, 2.0), (60.0, 1.0), (100.0, 1.0), (150.0, 2.0)]
        .into_iter()
        .map(|(deg, s)| (f64::to_radians(deg), s))
        .collect()
}

impl Default for ErgonomicModel {
    fn default() -> Self {
        ErgonomicModel {
            flexion: PiecewiseLinear::new(
                vec![
                    (-PI / 3.0, 2.0),
                    (-2.0 * PI / 9.0, 1.0),
                    (0.0, 0.0),
                    (2.0 * PI / 9.0, 1.0),
                    (PI / 4.0, 2.0),
                    (PI / 2.0, 3.0),
                    (PI, 4.0),
                ],
                Extrapolation::Linear,
            ),
            abduction: symmetric_ramp(PI / 6.0, PI / 3.0),
            rotation: symmetric_ramp(PI / 4.0, PI / 2.0),
            elbow: PiecewiseLinear::new(default_elbow_anchors(), Extrapolation::Linear),
        }
    }
}

impl ErgonomicModel {
    /// Default model with different elbow anchors (flexion radians, score).
    pub fn with_elbow_anchors(anchors: Vec<(f64, f64)>) -> Self {
        ErgonomicModel { elbow: PiecewiseLinear::new(anchors, Extrapolation::Linear), ..Default::default() }
    }

    pub fn shoulder_flexion_score(&self, q2: f64) -> f64 {
        self.flexion.eval(q2)
    }

    pub fn elbow_score(&self, q4: f64) -> f64 {
        self.elbow.eval(q4 + ELBOW_FLEXION_OFFSET)
    }

    pub fn arm_score(&self, q: &[f64; 4]) -> ArmScore {
        let shoulder = self.flexion.eval(q[1]) + self.abduction.eval(q[0]) + self.rotation.eval(q[2]);
        let elbow = self.elbow_score(q[3]);
        ArmScore { shoulder, elbow, total: shoulder + elbow }
    }

    pub fn bimanual_score(&self, left: &ArmState, right: &ArmState) -> ErgonomicScore {
        let l = self.arm_score(&left.q);
        let r = self.arm_score(&right.q);
        ErgonomicScore { left: l, right: r, overall: l.total.max(r.total) }
    }

    /// Per-arm total and its gradient in `q`. With `smoothing = Some(k)` every
    /// kink is softened with sharpness `k`; otherwise the exact piecewise
    /// slope is returned.
    pub fn arm_total_with_gradient(&self, q: &[f64; 4], smoothing: Option<f64>) -> (f64, [f64; 4]) {
        let curves = [&self.abduction, &self.flexion, &self.rotation, &self.elbow];
        let offsets = [0.0, 0.0, 0.0, ELBOW_FLEXION_OFFSET];
        let mut total = 0.0;
        let mut grad = [0.0; 4];
        for i in 0..4 {
            let x = q[i] + offsets[i];
            let (v, g) = match smoothing {
                Some(k) => curves[i].eval_smooth(x, k),
                None => (curves[i].eval(x), curves[i].slope(x)),
            };
            total += v;
            grad[i] = g;
        }
        (total, grad)
    }
}

pub fn shoulder_score(q2: f64) -> f64 {
    ErgonomicModel::default().shoulder_flexion_score(q2)
}

pub fn elbow_score(q4: f64) -> f64 {
    ErgonomicModel::default().elbow_score(q4)
}

pub fn bimanual_score(left: &ArmState, right: &ArmState) -> ErgonomicScore {
    ErgonomicModel::default().bimanual_score(left, right)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{Side, JOINT_LOWER, JOINT_UPPER};
    use proptest::prelude::*;

    #[test]
    fn shoulder_anchor_table() {
        for (q2, s) in [(0.0, 0.0), (2.0 * PI / 9.0, 1.0), (PI / 4.0, 2.0), (PI / 2.0, 3.0), (PI, 4.0)] {
            assert_eq!(shoulder_score(q2), s, "q2 = {q2}");
        }
        assert_eq!(shoulder_score(-PI / 3.0), 2.0);
        assert_eq!(shoulder_score(-2.0 * PI / 9.0), 1.0);
    }

    #[test]
    fn first_branch_matches_linear_formula() {
        for q2 in [-0.5, -0.2, 0.1, 0.6] {
            assert!((shoulder_score(q2) - q2.abs() / (2.0 * PI / 9.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn elbow_band() {
        let m = ErgonomicModel::default();
        // 80 deg flexion
        assert_eq!(m.elbow.eval(80f64.to_radians()), 1.0);
        assert_eq!(elbow_score(80f64.to_radians() - ELBOW_FLEXION_OFFSET), 1.0);
        // full extension
        assert_eq!(m.elbow.eval(0.0), 2.0);
        assert_eq!(elbow_score(-PI / 2.0), 2.0);
        // flexion limit of the joint box
        assert!((elbow_score(JOINT_UPPER[3]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn continuity_at_breakpoints() {
        let m = ErgonomicModel::default();
        for curve in [&m.flexion, &m.abduction, &m.rotation, &m.elbow] {
            for &(x, y) in curve.knots() {
                let h = 1e-14;
                assert!((curve.eval(x - h) - y).abs() < 1e-12);
                assert!((curve.eval(x + h) - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bimanual_takes_max() {
        let l = ArmState::new(Side::Left, [0.0, 0.3, 0.0, -0.2]);
        let r = ArmState::new(Side::Right, [0.0, 1.2, 0.0, 0.5]);
        let s = bimanual_score(&l, &r);
        assert_eq!(s.overall, s.right.total);
        assert!(s.right.total > s.left.total);
        let sym = bimanual_score(&ArmState::new(Side::Left, r.q), &r);
        assert_eq!(sym.left, sym.right);
        assert_eq!(sym.overall, sym.left.total);
    }

    #[test]
    fn smooth_curve_tracks_exact_away_from_kinks() {
        let m = ErgonomicModel::default();
        let (v, g) = m.flexion.eval_smooth(0.6, 1e4);
        assert!((v - m.flexion.eval(0.6)).abs() < 1e-6);
        assert!((g - m.flexion.slope(0.6)).abs() < 1e-6);
        // smoothing near a kink never leaves the exact value by more than ln2 * jump / k
        let (v, _) = m.elbow.eval_smooth(60f64.to_radians(), 50.0);
        assert!((v - 1.0).abs() < 0.05);
    }

    fn in_limits() -> impl Strategy<Value = [f64; 4]> {
        (
            JOINT_LOWER[0]..JOINT_UPPER[0],
            JOINT_LOWER[1]..JOINT_UPPER[1],
            JOINT_LOWER[2]..JOINT_UPPER[2],
            JOINT_LOWER[3]..JOINT_UPPER[3],
        )
            .prop_map(|(a, b, c, d)| [a, b, c, d])
    }

    proptest! {
        #[test]
        fn non_negative_and_zero_only_at_origin(q2 in -PI..PI) {
            let s = shoulder_score(q2);
            prop_assert!(s >= 0.0);
            if q2 != 0.0 { prop_assert!(s > 0.0); }
        }

        #[test]
        fn monotone_in_distance_from_optimum(a in 0.0f64..PI, b in 0.0f64..PI) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(shoulder_score(lo) <= shoulder_score(hi));
            let lo_n = -lo.min(PI / 3.0);
            let hi_n = -hi.min(PI / 3.0);
            prop_assert!(shoulder_score(lo_n) <= shoulder_score(hi_n));
        }

        #[test]
        fn arm_swap_symmetry(ql in in_limits(), qr in in_limits()) {
            let a = bimanual_score(&ArmState::new(Side::Left, ql), &ArmState::new(Side::Right, qr));
            let b = bimanual_score(&ArmState::new(Side::Left, qr), &ArmState::new(Side::Right, ql));
            prop_assert_eq!(a.overall, b.overall);
            prop_assert!(a.overall >= a.left.total && a.overall >= a.right.total);
            prop_assert!(a.left.shoulder >= 0.0 && a.left.elbow >= 0.0);
        }

        #[test]
        fn smooth_gradient_matches_differences(q in in_limits()) {
            let m = ErgonomicModel::default();
            let (_, g) = m.arm_total_with_gradient(&q, Some(50.0));
            let h = 1e-6;
            for i in 0..4 {
                let mut qp = q; qp[i] += h;
                let mut qm = q; qm[i] -= h;
                let fd = (m.arm_total_with_gradient(&qp, Some(50.0)).0 - m.arm_total_with_gradient(&qm, Some(50.0)).0) / (2.0 * h);
                prop_assert!((fd - g[i]).abs() < 1e-5, "joint {} fd {} analytic {}", i, fd, g[i]);
            }
        }
    }
}
