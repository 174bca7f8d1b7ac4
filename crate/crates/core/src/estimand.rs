//! Regime contrasts built from fitted effect grids.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::effects::FitReport;
use crate::error::{Error, Result};
use crate::numkit::{decay_power, mvn_sample};
use crate::weights::quantile_sorted;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastResult {
    pub k: usize,
    pub a_high: f64,
    pub a_low: f64,
    pub delta: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub draw_mean: f64,
    pub draw_sd: f64,
    pub level: f64,
    pub n_draws: usize,
    pub seed: u64,
}

/// `Δ_k = Σ_{j≤k} β_k(j)·(a_high − a_low)`: sustained `a_high` versus
/// sustained `a_low` through time `k`.
pub fn contrast_delta(fit: &FitReport, k: usize, a_high: f64, a_low: f64) -> Result<f64> {
    let idx = fit.outcome_params(k)?;
    let params: Vec<f64> = idx.iter().map(|&i| fit.coef[i]).collect();
    Ok(fit.expand_outcome(k, &params).iter().sum::<f64>() * (a_high - a_low))
}

/// Parametric bootstrap: draw the outcome-`k` coefficients from a normal at
/// the estimate with the sandwich covariance and take percentiles of `Δ_k`.
pub fn bootstrap_ci(
    fit: &FitReport,
    k: usize,
    a_high: f64,
    a_low: f64,
    n_draws: usize,
    level: f64,
    seed: u64,
) -> Result<ContrastResult> {
    if n_draws == 0 {
        return Err(Error::InvalidConfig("need at least one bootstrap draw".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!("level must lie in (0, 1), got {level}")));
    }
    let idx = fit.outcome_params(k)?;
    let delta = contrast_delta(fit, k, a_high, a_low)?;
    let cov = fit.cov_sandwich().select_rows(&idx).select_columns(&idx);
    let mean = DVector::from_iterator(idx.len(), idx.iter().map(|&i| fit.coef[i]));
    let draws = mvn_sample(&mean, &cov, n_draws, seed)?;
    let mut deltas: Vec<f64> = draws
        .row_iter()
        .map(|row| {
            let p: Vec<f64> = row.iter().copied().collect();
            fit.expand_outcome(k, &p).iter().sum::<f64>() * (a_high - a_low)
        })
        .collect();
    let draw_mean = deltas.iter().sum::<f64>() / n_draws as f64;
    let draw_sd = if n_draws > 1 {
        (deltas.iter().map(|d| (d - draw_mean).powi(2)).sum::<f64>() / (n_draws - 1) as f64).sqrt()
    } else {
        0.0
    };
    deltas.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(ContrastResult {
        k,
        a_high,
        a_low,
        delta,
        ci_lo: quantile_sorted(&deltas, tail).min(delta),
        ci_hi: quantile_sorted(&deltas, 1.0 - tail).max(delta),
        draw_mean,
        draw_sd,
        level,
        n_draws,
        seed,
    })
}

/// `C_k = β·Σ_{j≤k} α^(t_k − t_j)`: cumulative effect of sustained unit
/// exposure implied by decay parameters.
pub fn implied_cumulative(beta: f64, alpha: f64, times: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > times.len() {
        return Err(Error::BadTimeIndex { index: k, k: times.len() });
    }
    Ok(beta * (1..=k).map(|j| decay_power(alpha, times[k - 1] - times[j - 1])).sum::<f64>())
}
