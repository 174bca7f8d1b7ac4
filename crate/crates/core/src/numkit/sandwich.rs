//! Sandwich covariances for moment estimators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::linalg::{pinv, row_covariance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SandwichFlavor {
    /// HC1 for (weighted) regression estimating equations.
    Hc1,
    /// HC1-corrected GMM sandwich.
    Gmm,
    /// Score-variance sandwich with a Moore–Penrose inverse of the gradient.
    IvMoorePenrose,
}

#[derive(Debug, Clone)]
pub struct SandwichCov {
    pub cov: DMatrix<f64>,
    pub flavor: SandwichFlavor,
    pub jacobian: DMatrix<f64>,
    pub omega: DMatrix<f64>,
}

impl SandwichCov {
    pub fn se(&self) -> DVector<f64> {
        DVector::from_iterator(self.cov.nrows(), (0..self.cov.nrows()).map(|i| self.cov[(i, i)].max(0.0).sqrt()))
    }
}

/// Central-difference Jacobian of a vector function, step `1e-6·(1+|θᵢ|)`.
pub fn fd_jacobian<F>(f: F, theta: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let p = theta.len();
    let base = f(theta);
    let mut jac = DMatrix::zeros(base.len(), p);
    for c in 0..p {
        let h = 1e-6 * (1.0 + theta[c].abs());
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[c] += h;
        dn[c] -= h;
        let diff = (f(&up) - f(&dn)) / (2.0 * h);
        jac.set_column(c, &diff);
    }
    jac
}

/// Sandwich covariance from per-unit moments (n×q) evaluated at θ̂ and the
/// Jacobian (q×p) of the mean moments.
///
/// Just-identified systems use `J⁻¹ Ω J⁻ᵀ / n`. Over-identified systems use
/// `(JᵀWJ)⁻¹JᵀW Ω WJ(JᵀWJ)⁻¹ / n` with `W` the GMM weighting matrix (identity
/// when absent); the Moore–Penrose flavour uses `J⁺ Ω J⁺ᵀ / n` throughout.
pub fn sandwich(
    per_unit: &DMatrix<f64>,
    jacobian: &DMatrix<f64>,
    flavor: SandwichFlavor,
    weight: Option<&DMatrix<f64>>,
) -> Result<SandwichCov> {
    let (n, q) = per_unit.shape();
    if jacobian.nrows() != q {
        return Err(Error::DimensionMismatch(format!(
            "{q} moments but Jacobian has {} rows",
            jacobian.nrows()
        )));
    }
    if per_unit.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteMoment);
    }
    if n <= q {
        return Err(Error::TooFewRows { have: n, need: q + 1 });
    }
    let p = jacobian.ncols();
    let omega = match flavor {
        SandwichFlavor::IvMoorePenrose => row_covariance(per_unit, 1),
        SandwichFlavor::Hc1 | SandwichFlavor::Gmm => row_covariance(per_unit, 0) * (n as f64 / (n - q) as f64),
    };
    let bread = match flavor {
        SandwichFlavor::IvMoorePenrose => pinv(jacobian),
        _ if q == p && weight.is_none() => jacobian
            .clone()
            .try_inverse()
            .filter(|m| m.iter().all(|v| v.is_finite()))
            .ok_or(Error::SingularJacobian)?,
        _ => {
            let w = weight.cloned().unwrap_or_else(|| DMatrix::identity(q, q));
            let jtw = jacobian.transpose() * &w;
            let inner = (&jtw * jacobian).try_inverse().ok_or(Error::SingularJacobian)?;
            inner * jtw
        }
    };
    let mut cov = &bread * &omega * bread.transpose() / n as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    Ok(SandwichCov { cov, flavor, jacobian: jacobian.clone(), omega })
}

/// How to obtain the Jacobian in [`gmm_sandwich`].
pub enum JacobianSource {
    Analytic(DMatrix<f64>),
    FiniteDifference,
}

/// Sandwich for a moment function `θ ↦ per-unit moments (n×q)`.
pub fn gmm_sandwich<F>(
    moments: F,
    theta_hat: &DVector<f64>,
    jacobian: JacobianSource,
    flavor: SandwichFlavor,
    weight: Option<&DMatrix<f64>>,
) -> Result<SandwichCov>
where
    F: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    let per_unit = moments(theta_hat);
    let jac = match jacobian {
        JacobianSource::Analytic(j) => j,
        JacobianSource::FiniteDifference => fd_jacobian(|t| moments(t).row_mean().transpose(), theta_hat),
    };
    sandwich(&per_unit, &jac, flavor, weight)
}
