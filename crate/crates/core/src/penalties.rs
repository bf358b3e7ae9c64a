//! Prior penalty terms: the GNSS translation penalty and the Lie rotational penalty.
//!
//! Both are Mahalanobis distances. For least squares they are whitened with
//! the lower Cholesky factor `L` of their covariance (`Sigma = L L^T`), so the
//! penalty equals the squared norm of `L^{-1} e`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::lie::{self, AxisAngle, Rotation};

/// Covariances with reciprocal condition number below this are rejected.
pub const MIN_RECIPROCAL_CONDITION: f64 = 1e-12;

/// Lower-triangular Cholesky factor and its inverse for a 3x3 SPD covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Whitener {
    pub l: Matrix3<f64>,
    pub l_inv: Matrix3<f64>,
}

impl Whitener {
    pub fn new(cov: &Matrix3<f64>) -> Result<Self> {
        if cov.iter().any(|v| !v.is_finite()) || (cov - cov.transpose()).norm() > 1e-9 * cov.norm().max(1.0) {
            return Err(Error::SingularCovariance);
        }
        let sym = 0.5 * (cov + cov.transpose());
        let eig = sym.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if !(lo > 0.0) || lo / hi < MIN_RECIPROCAL_CONDITION {
            return Err(Error::SingularCovariance);
        }
        let l = sym.cholesky().ok_or(Error::SingularCovariance)?.l();
        let l_inv = l
            .solve_lower_triangular(&Matrix3::identity())
            .ok_or(Error::SingularCovariance)?;
        Ok(Self { l, l_inv })
    }

    pub fn whiten(&self, e: &Vector3<f64>) -> Vector3<f64> {
        self.l_inv * e
    }

    /// `e^T Sigma^{-1} e`.
    pub fn mahalanobis(&self, e: &Vector3<f64>) -> f64 {
        self.whiten(e).norm_squared()
    }
}

/// Sensor orientation `C_s` with the covariance of its left perturbation,
/// `C_s = exp(eps^) * C_true`, `eps ~ N(0, sigma_eps)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationPrior {
    pub c_s: Rotation,
    pub sigma_eps: Matrix3<f64>,
    whitener: Whitener,
}

impl RotationPrior {
    pub fn new(c_s: Rotation, sigma_eps: Matrix3<f64>) -> Result<Self> {
        let whitener = Whitener::new(&sigma_eps)?;
        Ok(Self {
            c_s,
            sigma_eps,
            whitener,
        })
    }

    pub fn whitener(&self) -> &Whitener {
        &self.whitener
    }

    /// Same orientation with the covariance multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.c_s, self.sigma_eps * factor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslationPrior {
    pub t_s: Vector3<f64>,
    pub sigma_t: Matrix3<f64>,
    whitener: Whitener,
}

impl TranslationPrior {
    pub fn new(t_s: Vector3<f64>, sigma_t: Matrix3<f64>) -> Result<Self> {
        let whitener = Whitener::new(&sigma_t)?;
        Ok(Self {
            t_s,
            sigma_t,
            whitener,
        })
    }

    pub fn whitener(&self) -> &Whitener {
        &self.whitener
    }
}

/// Scaling factors of the point, GNSS and Lie terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyWeights {
    pub alpha_p: f64,
    pub alpha_t: f64,
    pub alpha_theta: f64,
}

impl Default for PenaltyWeights {
    fn default() -> Self {
        Self {
            alpha_p: 1.0,
            alpha_t: 1.0,
            alpha_theta: 1.0,
        }
    }
}

impl PenaltyWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_p", self.alpha_p),
            ("alpha_t", self.alpha_t),
            ("alpha_theta", self.alpha_theta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Optional sensor priors for one registration.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Priors {
    pub translation: Option<TranslationPrior>,
    pub rotation: Option<RotationPrior>,
}

impl Priors {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.translation.is_none() && self.rotation.is_none()
    }
}

/// `beta^T Sigma_eps^{-1} beta` with `beta = log(C_s C_i^T)`.
///
/// The first-order error `e = beta + J(beta)^{-1} eps` has covariance
/// `J^{-1} Sigma_eps J^{-T}`, so its Mahalanobis norm is
/// `beta^T J^T Sigma_eps^{-1} J beta`; since `J(beta) beta = beta` this
/// collapses to the short form evaluated here.
pub fn rotation_penalty(prior: &RotationPrior, c_i: &Rotation) -> Result<f64> {
    let beta = lie::rotation_error(&prior.c_s, c_i)?;
    Ok(prior.whitener.mahalanobis(&beta))
}

pub fn translation_penalty(prior: &TranslationPrior, t_i: &Vector3<f64>) -> Result<f64> {
    Ok(prior.whitener.mahalanobis(&(t_i - prior.t_s)))
}

/// Whitened rotation residual `L^{-1} beta` and its Jacobian with respect to a
/// left increment `exp(delta^) * C_i`.
///
/// `C_s (exp(delta^) C_i)^T = exp(beta^) exp(-delta^)`, so to first order
/// `d beta / d delta = -J_r^{-1}(beta)`.
pub fn rotation_penalty_residual(
    prior: &RotationPrior,
    c_i: &Rotation,
) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    let beta: AxisAngle = lie::rotation_error(&prior.c_s, c_i)?;
    let jr_inv = lie::right_jacobian_inv(&beta)?;
    let l_inv = &prior.whitener.l_inv;
    Ok((l_inv * beta, -(l_inv * jr_inv)))
}

/// Whitened translation residual `L_t^{-1} (t_i - t_s)`; the Jacobian with
/// respect to an additive translation increment is the constant `L_t^{-1}`.
pub fn translation_penalty_residual(
    prior: &TranslationPrior,
    t_i: &Vector3<f64>,
) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    let l_inv = prior.whitener.l_inv;
    Ok((l_inv * (t_i - prior.t_s), l_inv))
}
