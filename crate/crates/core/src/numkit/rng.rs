//! Seeded random number generation.
//!
//! All randomness flows through [`SimRng`], a ChaCha8 stream seeded from a
//! `u64`. Streams are deterministic within a build; parallel workers derive
//! their own stream from `base_seed + index`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::linalg::psd_factor;
use crate::error::{Error, Result};

pub type SimRng = ChaCha8Rng;

pub fn rng_new(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normal(rng: &mut SimRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal(rng: &mut SimRng, mean: f64, sd: f64) -> f64 {
    mean + sd * standard_normal(rng)
}

/// Binomial(2, p) as the sum of two Bernoulli(p) draws.
pub fn binomial2(rng: &mut SimRng, p: f64) -> f64 {
    let a = rng.random::<f64>() < p;
    let b = rng.random::<f64>() < p;
    (a as u8 + b as u8) as f64
}

/// `n_draws` rows from N(mean, cov).
pub fn mvn_sample(mean: &DVector<f64>, cov: &DMatrix<f64>, n_draws: usize, seed: u64) -> Result<DMatrix<f64>> {
    let q = mean.len();
    if cov.shape() != (q, q) {
        return Err(Error::DimensionMismatch(format!("mean of length {q}, cov {:?}", cov.shape())));
    }
    let sym_err = (cov - cov.transpose()).amax();
    if sym_err > 1e-10 * cov.amax().max(1.0) {
        return Err(Error::NotPsd);
    }
    let factor = psd_factor(cov)?;
    let mut rng = rng_new(seed);
    let mut out = DMatrix::zeros(n_draws, q);
    let mut z = DVector::zeros(q);
    for r in 0..n_draws {
        for v in z.iter_mut() {
            *v = standard_normal(&mut rng);
        }
        let draw = mean + &factor * &z;
        out.set_row(r, &draw.transpose());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_cov_returns_mean() {
        let mean = DVector::from_vec(vec![1.5, -2.0]);
        let draws = mvn_sample(&mean, &DMatrix::zeros(2, 2), 50, 3).unwrap();
        for r in 0..50 {
            assert_eq!(draws[(r, 0)], 1.5);
            assert_eq!(draws[(r, 1)], -2.0);
        }
    }

    #[test]
    fn unit_variance_sd_within_clt_band() {
        let draws = mvn_sample(&DVector::zeros(1), &DMatrix::identity(1, 1), 100_000, 11).unwrap();
        let col = draws.column(0);
        let mean = col.mean();
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64).sqrt();
        assert!((sd - 1.0).abs() < 0.02, "sd = {sd}");
    }

    #[test]
    fn same_seed_same_draws() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        let mean = DVector::from_vec(vec![0.0, 1.0]);
        let a = mvn_sample(&mean, &cov, 100, 42).unwrap();
        let b = mvn_sample(&mean, &cov, 100, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn binomial_mean() {
        let mut rng = rng_new(5);
        let n = 20_000;
        let mean = (0..n).map(|_| binomial2(&mut rng, 0.2)).sum::<f64>() / n as f64;
        assert!((mean - 0.4).abs() < 0.02);
    }
}
