//! Rotation-group primitives: skew operator, exponential map, logarithm and
//! the inverse retraction used to anchor pose windows.
//!
//! Rotations are stored as explicit 3x3 matrices. Updates during optimization
//! are right-multiplicative: `R <- R * exp(skew(w))` with `w` a tangent
//! vector in radians.

use nalgebra::{Matrix3, Vector3};

use crate::error::{CoreError, Result};

/// Angle below which series expansions replace the closed-form ratios.
const SMALL_ANGLE: f64 = 1e-8;

/// Skew-symmetric operator: `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map of so(3) via Rodrigues' formula.
///
/// Below [`SMALL_ANGLE`] the sinc terms are replaced by their second-order
/// Taylor series to avoid 0/0.
pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let s = skew(w);
    let (a, b) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    };
    Matrix3::identity() + s * a + s * s * b
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Logarithm of a rotation matrix.
///
/// Errors with [`CoreError::AmbiguousAxis`] when the angle is numerically at
/// pi, where the axis is not unique.
pub fn log_so3(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let anti = (r - r.transpose()) * 0.5;
    if theta < SMALL_ANGLE {
        // log(R) ~ (R - R^T)/2 for small angles.
        return Ok(vee(&anti));
    }
    if std::f64::consts::PI - theta < 1e-7 {
        return Err(CoreError::AmbiguousAxis);
    }
    Ok(vee(&anti) * (theta / theta.sin()))
}

/// Inverse of the right Jacobian of the exponential map.
///
/// This is the derivative of `w -> log(R0^T * R * exp(skew(w)))` at `w = 0`
/// expressed in terms of `phi = log(R0^T * R)`; it appears in the analytic
/// Jacobians of anchor residuals `R (-) R0`.
pub fn right_jacobian_inv_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let s = skew(phi);
    let c = if theta < 1e-4 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + s * 0.5 + s * s * c
}

/// A rotation matrix with orthonormality enforced at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    matrix: Matrix3<f64>,
}

impl Rotation {
    pub const ORTHONORMALITY_TOL: f64 = 1e-12;

    /// Wraps a matrix, checking `||R^T R - I|| <= 1e-12` and `det(R) = 1`.
    pub fn new(matrix: Matrix3<f64>) -> Result<Self> {
        let defect = (matrix.transpose() * matrix - Matrix3::identity()).norm();
        if defect > 1e-9 || (matrix.determinant() - 1.0).abs() > 1e-9 {
            return Err(CoreError::InvalidConfig(format!(
                "matrix is not a rotation (orthonormality defect {defect:.3e})"
            )));
        }
        Ok(Self { matrix })
    }

    /// Wraps a matrix that is known to be a rotation by construction.
    pub fn from_matrix_unchecked(matrix: Matrix3<f64>) -> Self {
        Self { matrix }
    }

    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
        }
    }

    /// Exponential map: rotation about axis `w / |w|` by angle `|w|` radians.
    pub fn exp(w: &Vector3<f64>) -> Self {
        Self { matrix: exp_so3(w) }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    /// Tangent vector of this rotation relative to the identity.
    pub fn log(&self) -> Result<Vector3<f64>> {
        log_so3(&self.matrix)
    }

    /// Inverse retraction `self (-) other`: zero iff the rotations coincide,
    /// with norm equal to the geodesic angle between them.
    pub fn ominus(&self, other: &Rotation) -> Result<Vector3<f64>> {
        log_so3(&(other.matrix.transpose() * self.matrix))
    }

    /// Right-multiplicative retraction `R * exp(skew(w))`.
    pub fn retract(&self, w: &Vector3<f64>) -> Self {
        Self {
            matrix: self.matrix * exp_so3(w),
        }
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self {
            matrix: self.matrix * other.matrix,
        }
    }
}

impl std::ops::Mul<Vector3<f64>> for &Rotation {
    type Output = Vector3<f64>;

    fn mul(self, v: Vector3<f64>) -> Vector3<f64> {
        self.matrix * v
    }
}
