//! Stabilised inverse-probability weights for a continuous exposure.
//!
//! Per time `s` the denominator models `A_s | H_s` as Gaussian with a linear
//! mean in the history design; the numerator is the marginal Gaussian of
//! `A_s`. Step weights are density ratios, cumulative weights their running
//! product.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{fd_jacobian, solve_linear, LeastSquares};
use crate::panel::{history_design, Design, PanelData};

const MIN_SD: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMethod {
    GaussianMl,
    BalanceExact,
}

/// Fitted exposure density models for one time point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityStep {
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    pub sd_den: f64,
    pub mean_num: f64,
    pub sd_num: f64,
    /// False when exact balancing failed and the ML model was kept.
    pub balanced: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityModel {
    pub steps: Vec<DensityStep>,
}

#[derive(Debug, Clone)]
pub struct WeightSet {
    /// Cumulative stabilised weights, n×K.
    pub w: DMatrix<f64>,
    /// Per-step ratios, n×K.
    pub w_step: DMatrix<f64>,
    pub method: WeightMethod,
    pub truncation: Option<(f64, f64)>,
    /// Set when balancing fell back to ML at any time point.
    pub fallback: bool,
}

impl WeightSet {
    fn from_steps(w_step: DMatrix<f64>, method: WeightMethod, fallback: bool) -> Self {
        let w = cumulate(&w_step);
        Self { w, w_step, method, truncation: None, fallback }
    }

    /// All-ones weights.
    pub fn unit(n: usize, k: usize) -> Self {
        Self::from_steps(DMatrix::from_element(n, k, 1.0), WeightMethod::GaussianMl, false)
    }

    /// Clamp each step-weight column to its `[lo, hi]` percentiles (in
    /// percent) and rebuild the cumulative product.
    pub fn truncated(&self, lo: f64, hi: f64) -> Result<WeightSet> {
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
            return Err(Error::InvalidConfig(format!("bad truncation percentiles {lo},{hi}")));
        }
        let mut steps = self.w_step.clone();
        for mut col in steps.column_iter_mut() {
            let mut sorted: Vec<f64> = col.iter().copied().collect();
            sorted.sort_by(f64::total_cmp);
            let (qlo, qhi) = (quantile_sorted(&sorted, lo / 100.0), quantile_sorted(&sorted, hi / 100.0));
            col.apply(|v| *v = v.clamp(qlo, qhi));
        }
        let mut out = Self::from_steps(steps, self.method, self.fallback);
        out.truncation = Some((lo, hi));
        Ok(out)
    }
}

fn cumulate(w_step: &DMatrix<f64>) -> DMatrix<f64> {
    let mut w = w_step.clone();
    for s in 1..w.ncols() {
        for i in 0..w.nrows() {
            w[(i, s)] = w[(i, s - 1)] * w_step[(i, s)];
        }
    }
    w
}

fn log_normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn sample_sd(x: &DVector<f64>) -> f64 {
    let m = x.mean();
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

fn step_weights(a: &DVector<f64>, mean_den: &DVector<f64>, sd_den: f64, mean_num: f64, sd_num: f64) -> DVector<f64> {
    DVector::from_iterator(
        a.len(),
        a.iter()
            .zip(mean_den.iter())
            .map(|(x, m)| (log_normal_pdf(*x, mean_num, sd_num) - log_normal_pdf(*x, *m, sd_den)).exp()),
    )
}

struct MlStep {
    design: Design,
    coef: DVector<f64>,
    sd_den: f64,
    mean_num: f64,
    sd_num: f64,
}

fn ml_step(panel: &PanelData, s: usize, exclude: &HashSet<String>) -> Result<MlStep> {
    let design = history_design(panel, s, exclude)?;
    let ls = LeastSquares::new(&design.x, None, Some(&design.names))?;
    let a = panel.a_col(s);
    let fit = ls.fit(&a)?;
    let sd_den = (fit.residuals.norm_squared() / fit.dof as f64).sqrt();
    let sd_num = sample_sd(&a);
    if sd_den < MIN_SD || sd_num < MIN_SD {
        return Err(Error::DegenerateSd(s));
    }
    Ok(MlStep { design, coef: fit.coef, sd_den, mean_num: a.mean(), sd_num })
}

/// Gaussian maximum-likelihood density ratio weights.
pub fn fit_weights_gaussian(panel: &PanelData, exclude: &HashSet<String>) -> Result<(DensityModel, WeightSet)> {
    let (n, k) = (panel.n(), panel.k());
    let mut steps = Vec::with_capacity(k);
    let mut w_step = DMatrix::zeros(n, k);
    for s in 1..=k {
        let ml = ml_step(panel, s, exclude)?;
        let a = panel.a_col(s);
        let mean_den = &ml.design.x * &ml.coef;
        w_step.set_column(s - 1, &step_weights(&a, &mean_den, ml.sd_den, ml.mean_num, ml.sd_num));
        steps.push(DensityStep {
            names: ml.design.names,
            coef: ml.coef.iter().copied().collect(),
            sd_den: ml.sd_den,
            mean_num: ml.mean_num,
            sd_num: ml.sd_num,
            balanced: false,
        });
    }
    Ok((DensityModel { steps }, WeightSet::from_steps(w_step, WeightMethod::GaussianMl, false)))
}

/// Standardised copy of a design: intercept kept, other columns centred and scaled.
fn standardized(design: &Design) -> DMatrix<f64> {
    let mut x = design.x.clone();
    for (c, mut col) in x.column_iter_mut().enumerate() {
        if design.names[c] == "1" {
            continue;
        }
        let sd = sample_sd(&col.clone_owned());
        let m = col.mean();
        if sd > 0.0 {
            col.apply(|v| *v = (*v - m) / sd);
        }
    }
    x
}

/// Denominator SD implied by mean-model coefficients.
fn profiled_sd(x: &DMatrix<f64>, a: &DVector<f64>, coef: &DVector<f64>) -> f64 {
    let rss = (a - x * coef).norm_squared();
    (rss / (a.len() - x.ncols()) as f64).sqrt()
}

/// Balance moments `mean(w·A*·x*)` over the standardised history columns
/// (intercept included), with the denominator SD profiled from the mean model.
fn balance_moments(
    coef: &DVector<f64>,
    x: &DMatrix<f64>,
    xs: &DMatrix<f64>,
    a: &DVector<f64>,
    mean_num: f64,
    sd_num: f64,
) -> DVector<f64> {
    let w = step_weights(a, &(x * coef), profiled_sd(x, a, coef), mean_num, sd_num);
    let wa = DVector::from_fn(a.len(), |i, _| w[i] * (a[i] - mean_num) / sd_num);
    xs.tr_mul(&wa) / a.len() as f64
}

const BALANCE_TOL: f64 = 1e-10;
const BALANCE_MAX_ITER: usize = 100;

/// Levenberg–Marquardt on the squared balance moments, started at the ML fit.
fn balance_step(panel: &PanelData, s: usize, ml: &MlStep) -> Option<(DVector<f64>, f64)> {
    let x = &ml.design.x;
    let xs = standardized(&ml.design);
    let a = panel.a_col(s);
    let moments = |p: &DVector<f64>| balance_moments(p, x, &xs, &a, ml.mean_num, ml.sd_num);
    let mut coef = ml.coef.clone();
    let mut m = moments(&coef);
    let mut ss = m.norm_squared();
    let mut lambda = 1e-3;
    let mut stalled = 0;
    for _ in 0..BALANCE_MAX_ITER {
        if m.amax() < BALANCE_TOL {
            break;
        }
        let jac = fd_jacobian(moments, &coef);
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &m;
        let mut accepted = false;
        while lambda < 1e8 {
            let mut lhs = jtj.clone();
            for d in 0..lhs.nrows() {
                lhs[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Ok(step) = solve_linear(&lhs, &(-&g)) else { break };
            let trial = &coef + step;
            let mt = moments(&trial);
            let st = mt.norm_squared();
            if st.is_finite() && st < ss {
                // a root drives ss to zero quickly; slow creep means none nearby
                stalled = if st > 0.9 * ss { stalled + 1 } else { 0 };
                coef = trial;
                m = mt;
                ss = st;
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted || stalled >= 10 {
            break;
        }
    }
    (m.amax() < BALANCE_TOL).then(|| {
        let sd = profiled_sd(x, &a, &coef);
        (coef, sd)
    })
}

/// Weights whose denominator mean model is calibrated so that, at each time,
/// the weighted standardised exposure is orthogonal to every standardised
/// history column. Falls back to the ML weights (with `fallback` set)
/// when the root search fails.
pub fn fit_weights_balanced(panel: &PanelData, exclude: &HashSet<String>) -> Result<(DensityModel, WeightSet)> {
    let (n, k) = (panel.n(), panel.k());
    let mut steps = Vec::with_capacity(k);
    let mut w_step = DMatrix::zeros(n, k);
    let mut fallback = false;
    for s in 1..=k {
        let ml = ml_step(panel, s, exclude)?;
        let a = panel.a_col(s);
        let (coef, sd_den, balanced) = match balance_step(panel, s, &ml) {
            Some((coef, sd)) => (coef, sd, true),
            None => {
                log::warn!("exact balance did not converge at time {s}; using ML weights");
                fallback = true;
                (ml.coef.clone(), ml.sd_den, false)
            }
        };
        let mean_den = &ml.design.x * &coef;
        w_step.set_column(s - 1, &step_weights(&a, &mean_den, sd_den, ml.mean_num, ml.sd_num));
        steps.push(DensityStep {
            names: ml.design.names,
            coef: coef.iter().copied().collect(),
            sd_den,
            mean_num: ml.mean_num,
            sd_num: ml.sd_num,
            balanced,
        });
    }
    Ok((DensityModel { steps }, WeightSet::from_steps(w_step, WeightMethod::BalanceExact, fallback)))
}

/// Per-time weight summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDiagRow {
    pub time: usize,
    pub ess: f64,
    pub share_top1: f64,
    pub q999: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// Empirical quantile with linear interpolation between order statistics
/// (position `(n−1)·p`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn diagnostics_for(weights: &[f64], time: usize) -> WeightDiagRow {
    let n = weights.len();
    let sum: f64 = weights.iter().sum();
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    let mut sorted = weights.to_vec();
    sorted.sort_by(f64::total_cmp);
    let top = ((0.01 * n as f64).ceil() as usize).max(1);
    let top_sum: f64 = sorted[n - top..].iter().sum();
    WeightDiagRow {
        time,
        ess: sum * sum / sum_sq,
        share_top1: top_sum / sum,
        q999: quantile_sorted(&sorted, 0.999),
        min: sorted[0],
        max: sorted[n - 1],
        mean: sum / n as f64,
    }
}

/// ESS, top-1% share and 99.9th percentile of the cumulative weights.
pub fn weight_diagnostics(ws: &WeightSet) -> Vec<WeightDiagRow> {
    ws.w
        .column_iter()
        .enumerate()
        .map(|(s, col)| diagnostics_for(col.as_slice(), s + 1))
        .collect()
}

pub const BALANCE_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceCell {
    pub time: usize,
    pub column: String,
    /// `None` when the covariate has no weighted variance.
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub flagged: bool,
}

fn weighted_corr(x: &[f64], y: &[f64], w: &[f64]) -> Option<f64> {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxy += w[i] * dx * dy;
        sxx += w[i] * dx * dx;
        syy += w[i] * dy * dy;
    }
    let scale = sxx * syy;
    if !(sxx > 1e-14 * sw) || !(syy > 1e-14 * sw) || !(scale > 0.0) {
        return None;
    }
    Some(sxy / scale.sqrt())
}

/// Weighted mid-ranks: mass strictly below plus half the tied mass.
fn weighted_midranks(x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut below = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut tied = 0.0;
        while j < order.len() && x[order[j]] == x[order[i]] {
            tied += w[order[j]];
            j += 1;
        }
        for &idx in &order[i..j] {
            ranks[idx] = below + 0.5 * tied;
        }
        below += tied;
        i = j;
    }
    ranks
}

pub fn weighted_pearson(x: &[f64], y: &[f64], w: &[f64]) -> Option<f64> {
    weighted_corr(x, y, w)
}

pub fn weighted_spearman(x: &[f64], y: &[f64], w: &[f64]) -> Option<f64> {
    let rx = weighted_midranks(x, w);
    let ry = weighted_midranks(y, w);
    weighted_corr(&rx, &ry, w)
}

/// Absolute weighted correlations between each `A_s` and the columns of its
/// history design, weighting by the step-`s` weights.
pub fn balance_table(panel: &PanelData, ws: &WeightSet, exclude: &HashSet<String>) -> Result<Vec<BalanceCell>> {
    let mut cells = Vec::new();
    for s in 1..=panel.k() {
        let design = history_design(panel, s, exclude)?.without_intercept();
        let a = panel.a_col(s);
        let w = ws.w_step.column(s - 1).into_owned();
        for (c, name) in design.names.iter().enumerate() {
            let col: Vec<f64> = design.x.column(c).iter().copied().collect();
            let pearson = weighted_pearson(a.as_slice(), &col, w.as_slice()).map(f64::abs);
            let spearman = weighted_spearman(a.as_slice(), &col, w.as_slice()).map(f64::abs);
            let flagged = pearson.is_some_and(|v| v > BALANCE_THRESHOLD) || spearman.is_some_and(|v| v > BALANCE_THRESHOLD);
            cells.push(BalanceCell { time: s, column: name.clone(), pearson, spearman, flagged });
        }
    }
    Ok(cells)
}

/// Covariates flagged as imbalanced at any time up to `k`, excluding
/// exposures (which the outcome model already contains).
pub fn flagged_covariates(cells: &[BalanceCell], k: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for c in cells.iter().filter(|c| c.time <= k && c.flagged) {
        if !c.column.starts_with('A') && !out.contains(&c.column) {
            out.push(c.column.clone());
        }
    }
    out
}
