//! Numeric kernel shared by every estimator.

pub mod linalg;
pub mod rng;
pub mod sandwich;
pub mod simplex;

pub use linalg::{cholesky, ols_fit, pinv, solve_linear, wls_fit, LeastSquares, RegFit};
pub use rng::{mvn_sample, rng_new, SimRng};
pub use sandwich::{fd_jacobian, gmm_sandwich, sandwich, JacobianSource, SandwichCov, SandwichFlavor};
pub use simplex::{minimize_simplex, SimplexOptions, SimplexResult};

/// Two-sided 97.5% standard normal quantile.
pub const Z_975: f64 = 1.959_963_984_540_054;

/// `α^lag`, with integer lags taken through `powi` so negative `α` stays real.
pub fn decay_power(alpha: f64, lag: f64) -> f64 {
    if (lag - lag.round()).abs() < 1e-12 {
        alpha.powi(lag.round() as i32)
    } else {
        alpha.powf(lag)
    }
}
