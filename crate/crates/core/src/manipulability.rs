//! Force manipulability ellipsoid of the arm.
//!
//! For a wrist Jacobian `J` the set of wrist forces reachable with unit-norm
//! joint torques is `{f : f' J J' f <= 1}`, the ellipsoid with shape matrix
//! `M_F = (J J')^-1`. A small diagonal regularization keeps the inverse finite
//! near full elbow extension.

use nalgebra::{Matrix3, Matrix3x4, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Vec3;

/// Relative regularization added to `J J'` before inversion.
pub const REGULARIZATION: f64 = 1e-10;
/// Largest condition number of the regularized `J J'` that is still accepted.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManipulabilityError {
    #[error("jacobian contains non-finite entries")]
    NonFinite,
    #[error("degenerate jacobian: condition number {condition:e} of J J^T")]
    DegenerateJacobian { condition: f64 },
}

/// How the force capacity along a load direction is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapacityMeasure {
    /// Ellipsoid radius along the direction, `1 / sqrt(d' J J' d)`.
    #[default]
    Radius,
    /// Major semi-axis projected on the direction, `sqrt(lambda_max) |v_max . d|`.
    MajorAxisProjection,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForceEllipsoid {
    /// `M_F`, the inverse of [`Self::metric`].
    pub shape: Matrix3<f64>,
    /// Regularized `J J' + sigma I`.
    pub metric: Matrix3<f64>,
    /// Eigenvalues of `M_F`, descending.
    pub eigenvalues: Vector3<f64>,
    /// Matching unit eigenvectors as columns.
    pub eigenvectors: Matrix3<f64>,
}

pub fn regularization(jjt: &Matrix3<f64>) -> f64 {
    REGULARIZATION * jjt.trace() / 3.0
}

pub fn force_ellipsoid(jac: &Matrix3x4<f64>) -> Result<ForceEllipsoid, ManipulabilityError> {
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(ManipulabilityError::NonFinite);
    }
    let jjt = jac * jac.transpose();
    let metric = jjt + Matrix3::identity() * regularization(&jjt);
    ellipsoid_from_metric(metric)
}

pub fn ellipsoid_from_metric(metric: Matrix3<f64>) -> Result<ForceEllipsoid, ManipulabilityError> {
    let eig = SymmetricEigen::new(metric);
    // metric eigenvalues ascending <=> M_F eigenvalues descending
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let smallest = eig.eigenvalues[order[0]];
    let largest = eig.eigenvalues[order[2]];
    if !(smallest > 0.0) || largest / smallest > MAX_CONDITION {
        let condition = if smallest > 0.0 { largest / smallest } else { f64::INFINITY };
        return Err(ManipulabilityError::DegenerateJacobian { condition });
    }
    let eigenvalues = Vector3::from_fn(|i, _| 1.0 / eig.eigenvalues[order[i]]);
    let mut eigenvectors = Matrix3::zeros();
    for (col, &k) in order.iter().enumerate() {
        eigenvectors.set_column(col, &eig.eigenvectors.column(k));
    }
    let shape = eigenvectors * Matrix3::from_diagonal(&eigenvalues) * eigenvectors.transpose();
    Ok(ForceEllipsoid { shape, metric, eigenvalues, eigenvectors })
}

impl ForceEllipsoid {
    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn major_axis(&self) -> Vec3 {
        self.eigenvectors.column(0).into_owned()
    }

    /// Force-ellipsoid radius along unit direction `d`.
    pub fn radius_along(&self, d: &Vec3) -> f64 {
        1.0 / d.dot(&(self.metric * d)).sqrt()
    }

    /// Largest wrist speed component along `d` for unit joint velocity,
    /// `max |d . J qdot|` with `|qdot| <= 1`. Reciprocal of [`Self::radius_along`].
    pub fn velocity_capacity_along(&self, d: &Vec3) -> f64 {
        d.dot(&(self.metric * d)).sqrt()
    }

    pub fn capacity(&self, d: &Vec3, measure: CapacityMeasure) -> f64 {
        match measure {
            CapacityMeasure::Radius => self.radius_along(d),
            CapacityMeasure::MajorAxisProjection => self.lambda_max().sqrt() * self.major_axis().dot(d).abs(),
        }
    }
}

/// Force capacity along the unit load direction `d`.
pub fn force_capacity_along(e: &ForceEllipsoid, d: &Vec3) -> f64 {
    e.radius_along(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn jac_with_jjt_diag(a: f64, b: f64, c: f64) -> Matrix3x4<f64> {
        Matrix3x4::new(a.sqrt(), 0.0, 0.0, 0.0, 0.0, b.sqrt(), 0.0, 0.0, 0.0, 0.0, 0.0, c.sqrt())
    }

    #[test]
    fn diagonal_inverse() {
        let e = force_ellipsoid(&jac_with_jjt_diag(4.0, 1.0, 0.25)).unwrap();
        // regularization perturbs the inverse at the 1e-9 level
        assert_relative_eq!(e.shape, Matrix3::from_diagonal(&Vector3::new(0.25, 1.0, 4.0)), epsilon = 1e-8);
        assert_relative_eq!(e.lambda_max(), 4.0, epsilon = 1e-8);
        assert_relative_eq!(e.major_axis().z.abs(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(force_capacity_along(&e, &Vector3::z()), 2.0, epsilon = 1e-9);
    }

    #[test]
    fn isotropic_sphere() {
        let e = force_ellipsoid(&jac_with_jjt_diag(1.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(e.shape, Matrix3::identity(), epsilon = 1e-9);
        let d = Vector3::new(1.0, -2.0, 0.5).normalize();
        assert_relative_eq!(force_capacity_along(&e, &d), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn zero_jacobian_is_degenerate() {
        assert!(matches!(force_ellipsoid(&Matrix3x4::zeros()), Err(ManipulabilityError::DegenerateJacobian { .. })));
        let mut j = jac_with_jjt_diag(1.0, 1.0, 1.0);
        j[(0, 0)] = f64::NAN;
        assert_eq!(force_ellipsoid(&j), Err(ManipulabilityError::NonFinite));
    }

    #[test]
    fn rank_deficient_stays_finite() {
        // a rank-2 jacobian is regularized rather than rejected
        let e = force_ellipsoid(&jac_with_jjt_diag(1.0, 1.0, 0.0)).unwrap();
        assert!(e.eigenvalues.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn projection_measure_on_major_axis() {
        let e = force_ellipsoid(&jac_with_jjt_diag(4.0, 1.0, 0.25)).unwrap();
        let z = Vector3::z();
        assert_relative_eq!(e.capacity(&z, CapacityMeasure::MajorAxisProjection), 2.0, epsilon = 1e-9);
        assert_relative_eq!(e.capacity(&Vector3::x(), CapacityMeasure::MajorAxisProjection), 0.0, epsilon = 1e-9);
    }

    fn arb_jacobian() -> impl Strategy<Value = Matrix3x4<f64>> {
        prop::array::uniform12(-1.0f64..1.0).prop_map(|v| Matrix3x4::from_row_slice(&v))
    }

    fn arb_dir() -> impl Strategy<Value = Vec3> {
        prop::array::uniform3(-1.0f64..1.0)
            .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-4)
            .prop_map(|v| Vector3::from(v).normalize())
    }

    proptest! {
        #[test]
        fn eigenvectors_orthonormal(j in arb_jacobian()) {
            if let Ok(e) = force_ellipsoid(&j) {
                prop_assert!((e.eigenvectors.transpose() * e.eigenvectors - Matrix3::identity()).norm() < 1e-10);
                prop_assert!(e.eigenvalues[0] >= e.eigenvalues[1] && e.eigenvalues[1] >= e.eigenvalues[2]);
                prop_assert!((e.shape - e.shape.transpose()).norm() <= 1e-9 * e.shape.norm());
            }
        }

        #[test]
        fn sign_invariant(j in arb_jacobian(), d in arb_dir()) {
            if let Ok(e) = force_ellipsoid(&j) {
                prop_assert_eq!(force_capacity_along(&e, &d), force_capacity_along(&e, &(-d)));
            }
        }

        #[test]
        fn rotation_equivariance(j in arb_jacobian(), axis in arb_dir(), angle in -3.0f64..3.0) {
            let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
            let (Ok(e), Ok(er)) = (force_ellipsoid(&j), force_ellipsoid(&(rot.matrix() * j))) else { return Ok(()); };
            prop_assume!(e.eigenvalues[0] / e.eigenvalues[2] < 1e6);
            prop_assume!((e.eigenvalues[0] - e.eigenvalues[1]).abs() > 1e-6 * e.eigenvalues[0]);
            prop_assume!((e.eigenvalues[1] - e.eigenvalues[2]).abs() > 1e-6 * e.eigenvalues[0]);
            for i in 0..3 {
                prop_assert!((e.eigenvalues[i] - er.eigenvalues[i]).abs() <= 1e-8 * e.eigenvalues[0]);
                let rotated = rot * e.eigenvectors.column(i).into_owned();
                let v = er.eigenvectors.column(i).into_owned();
                prop_assert!((rotated.dot(&v).abs() - 1.0).abs() < 1e-6);
            }
        }
    }
}
