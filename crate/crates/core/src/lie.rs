//! SO(3) and SE(3) primitives.
//!
//! Rotations are stored as 3x3 matrices. Tangent vectors use the
//! cross-product (hat) convention, so `hat(x) * v == x.cross(&v)` and
//! `vee(hat(x)) == x`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Element of so(3) identified with R^3, in radians.
pub type AxisAngle = Vector3<f64>;

/// Below this angle the closed forms are replaced by Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// `log_so3` rejects rotations whose trace is at or below `-1 + NEAR_PI_TRACE`.
pub const NEAR_PI_TRACE: f64 = 1e-9;

/// Tolerance for the orthonormality and determinant checks.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Orthonormality residual above which composition re-projects onto SO(3).
const REORTHONORMALIZE_ABOVE: f64 = 1e-12;

pub fn hat(phi: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -phi.z, phi.y, //
        phi.z, 0.0, -phi.x, //
        -phi.y, phi.x, 0.0,
    )
}

pub fn vee(m: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let asym = (m + m.transpose()).norm();
    if !(asym <= 1e-9) {
        return Err(Error::NotSkewSymmetric(asym));
    }
    Ok(Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)]))
}

/// Antisymmetric part of `m` mapped to R^3, without the skew check.
fn vee_antisymmetric(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// `(1 - cos t) / t^2`, written with a half-angle sine so it stays accurate for small `t`.
fn coeff_one_minus_cos(theta: f64) -> f64 {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        0.5 - t2 / 24.0 + t2 * t2 / 720.0
    } else {
        let s = (0.5 * theta).sin();
        2.0 * s * s / (theta * theta)
    }
}

fn coeff_sin(theta: f64) -> f64 {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 - t2 / 6.0 + t2 * t2 / 120.0
    } else {
        theta.sin() / theta
    }
}

fn coeff_theta_minus_sin(theta: f64) -> f64 {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    } else {
        (theta - theta.sin()) / (theta * theta * theta)
    }
}

pub fn exp_so3(phi: &AxisAngle) -> Rotation {
    let theta = phi.norm();
    let k = hat(phi);
    let m = Matrix3::identity() + k * coeff_sin(theta) + k * k * coeff_one_minus_cos(theta);
    Rotation(m)
}

/// Principal logarithm. The result has norm in `[0, pi)`.
pub fn log_so3(r: &Rotation) -> Result<AxisAngle> {
    let m = &r.0;
    let trace = m.trace();
    if trace <= -1.0 + NEAR_PI_TRACE {
        return Err(Error::AngleNearPi(trace));
    }
    let cos = (0.5 * (trace - 1.0)).clamp(-1.0, 1.0);
    // w = sin(theta) * axis
    let w = vee_antisymmetric(m);
    let sin = w.norm();
    let theta = sin.atan2(cos);
    let scale = if theta < SMALL_ANGLE {
        1.0 + sin * sin / 6.0
    } else {
        theta / sin
    };
    Ok(w * scale)
}

pub fn left_jacobian(beta: &AxisAngle) -> Matrix3<f64> {
    let theta = beta.norm();
    let k = hat(beta);
    Matrix3::identity() + k * coeff_one_minus_cos(theta) + k * k * coeff_theta_minus_sin(theta)
}

pub fn left_jacobian_inv(beta: &AxisAngle) -> Result<Matrix3<f64>> {
    let theta = beta.norm();
    if !(theta < 2.0 * std::f64::consts::PI - 1e-6) {
        return Err(Error::JacobianSingular(theta));
    }
    let k = hat(beta);
    let c = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        // 1/t^2 - (1 + cos t) / (2 t sin t), with (1 + cos t) / sin t = cot(t/2)
        let half = 0.5 * theta;
        1.0 / (theta * theta) - half.cos() / (half.sin() * 2.0 * theta)
    };
    Ok(Matrix3::identity() - k * 0.5 + k * k * c)
}

/// Inverse of the right Jacobian, `J_r^{-1}(x) = J_l^{-1}(-x)`.
pub fn right_jacobian_inv(beta: &AxisAngle) -> Result<Matrix3<f64>> {
    left_jacobian_inv(&(-beta))
}

/// `beta = log(C_s * C_i^T)`: the rotation taking the estimate onto the sensor reading.
pub fn rotation_error(c_s: &Rotation, c_i: &Rotation) -> Result<AxisAngle> {
    log_so3(&Rotation(c_s.0 * c_i.0.transpose()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates orthonormality and determinant within [`ROTATION_TOLERANCE`].
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        Self::from_matrix_with_tolerance(m, ROTATION_TOLERANCE)
    }

    /// Accepts `m` if it is a rotation within `tol`, then projects it onto SO(3).
    pub fn from_matrix_with_tolerance(m: Matrix3<f64>, tol: f64) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRotation("non-finite entry".into()));
        }
        let resid = orthonormality_residual(&m);
        if resid > tol {
            return Err(Error::InvalidRotation(format!(
                "orthonormality residual {resid:.3e}"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > tol {
            return Err(Error::InvalidRotation(format!("determinant {det}")));
        }
        if resid > REORTHONORMALIZE_ABOVE {
            Ok(Rotation(project_to_so3(&m)))
        } else {
            Ok(Rotation(m))
        }
    }

    pub fn exp(phi: &AxisAngle) -> Self {
        exp_so3(phi)
    }

    pub fn log(&self) -> Result<AxisAngle> {
        log_so3(self)
    }

    /// Rotation angle in `[0, pi]`, defined everywhere including near pi.
    pub fn angle(&self) -> f64 {
        let cos = (0.5 * (self.0.trace() - 1.0)).clamp(-1.0, 1.0);
        vee_antisymmetric(&self.0).norm().atan2(cos)
    }

    /// Rotation about the world z axis. The third row is exactly `(0, 0, 1)`.
    pub fn from_yaw(yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Rotation(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn from_roll_pitch_yaw(roll: f64, pitch: f64, yaw: f64) -> Self {
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
        let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
        Rotation(Self::from_yaw(yaw).0 * ry * rx)
    }

    /// Inverse of [`Rotation::from_roll_pitch_yaw`]. Roll and pitch depend only on the third row.
    pub fn roll_pitch_yaw(&self) -> (f64, f64, f64) {
        let m = &self.0;
        let pitch = (-m[(2, 0)]).clamp(-1.0, 1.0).asin();
        let roll = m[(2, 1)].atan2(m[(2, 2)]);
        let yaw = m[(1, 0)].atan2(m[(0, 0)]);
        (roll, pitch, yaw)
    }

    pub fn yaw(&self) -> f64 {
        self.roll_pitch_yaw().2
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// Composition `self * other`, re-projected onto SO(3) when drift exceeds 1e-12.
    pub fn compose(&self, other: &Rotation) -> Self {
        let m = self.0 * other.0;
        if orthonormality_residual(&m) > REORTHONORMALIZE_ABOVE {
            Rotation(project_to_so3(&m))
        } else {
            Rotation(m)
        }
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

pub fn orthonormality_residual(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).norm()
}

/// Closest rotation in the Frobenius sense (polar factor via SVD).
pub fn project_to_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Rigid transform `x -> R x + t`, mapping sensor coordinates into the world.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self::new(r_inv, -r_inv.rotate(&self.translation))
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self::new(
            self.rotation.compose(&other.rotation),
            self.rotation.rotate(&other.translation) + self.translation,
        )
    }

    /// Row-major `[R | t]`, the KITTI pose layout.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = self.rotation.matrix();
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x, //
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y, //
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    pub fn from_row_major(v: &[f64; 12], tol: f64) -> Result<Self> {
        let m = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let rotation = Rotation::from_matrix_with_tolerance(m, tol)?;
        let translation = Vector3::new(v[3], v[7], v[11]);
        if translation.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite translation".into()));
        }
        Ok(Self::new(rotation, translation))
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}
