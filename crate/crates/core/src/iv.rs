//! Instrumental-variable G-estimation under the decay model
//! `β_k(j) = β·α^(t_k − t_j)`.
//!
//! The score is `S(θ) = Σ_i (G_i − Ḡ)·Σ⁻¹·r_i(θ)` with
//! `r_{ik} = Y_{ik} − Σ_{j≤k} β·α^(t_k−t_j)·A_{ij}`. With more time points
//! than parameters the score cannot be zeroed, so `SᵀS` is minimised.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::effects::{to_rows, FitReport, Structure};
use crate::error::{Error, Result};
use crate::numkit::linalg::row_covariance;
use crate::numkit::{cholesky, decay_power, fd_jacobian, minimize_simplex, rng_new, sandwich, LeastSquares, SandwichFlavor, SimplexOptions};
use crate::panel::PanelData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSpec {
    Identity,
    ResidualCov,
}

impl std::str::FromStr for SigmaSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(SigmaSpec::Identity),
            "residual" | "residual_cov" => Ok(SigmaSpec::ResidualCov),
            other => Err(Error::InvalidConfig(format!("unknown sigma `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartialOut {
    BaselineOnly,
    /// Also residualise `A_k` and `Y_k` on the contemporaneous `V_k`. This is
    /// the wrong adjustment when `V` lies on the exposure-outcome path.
    BaselinePlusTimeVarying,
}

impl std::str::FromStr for PartialOut {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(PartialOut::BaselineOnly),
            "baseline+tv" => Ok(PartialOut::BaselinePlusTimeVarying),
            other => Err(Error::InvalidConfig(format!("unknown partial-out set `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IvFit {
    pub beta: f64,
    pub alpha: f64,
    pub cov_sandwich: Vec<Vec<f64>>,
    pub sigma_spec: SigmaSpec,
    pub partial_out_applied: Vec<String>,
    /// Euclidean norm of the score `S(θ̂)` (summed, not averaged).
    pub score_norm_at_solution: f64,
    pub partial_f: Vec<f64>,
    pub converged: bool,
    pub alpha_fixed: bool,
    pub n: usize,
    pub times: Vec<f64>,
}

impl IvFit {
    pub fn se(&self) -> (f64, f64) {
        (self.cov_sandwich[0][0].max(0.0).sqrt(), self.cov_sandwich[1][1].max(0.0).sqrt())
    }

    pub fn to_report(&self) -> FitReport {
        let mut flags = Vec::new();
        if !self.converged {
            flags.push("not_converged".into());
        }
        if self.alpha_fixed {
            flags.push("alpha_fixed".into());
        }
        FitReport {
            estimator: "iv".into(),
            structure: Structure::Decay,
            names: vec!["beta".into(), "alpha".into()],
            coef: vec![self.beta, self.alpha],
            index: Vec::new(),
            cov_naive: None,
            cov_sandwich: self.cov_sandwich.clone(),
            n: self.n,
            times: self.times.clone(),
            flags,
        }
    }
}

/// Covariates for partialling out time `s`: intercept, baseline columns
/// and, for the time-varying variant, the contemporaneous `V_s`.
fn partial_out_columns(panel: &PanelData, on: PartialOut, s: usize, exclude: &HashSet<String>) -> (Vec<String>, Vec<DVector<f64>>) {
    let mut names = vec!["1".to_string()];
    let mut cols = vec![DVector::from_element(panel.n(), 1.0)];
    for (c, name) in panel.l0_names.iter().enumerate() {
        if !exclude.contains(name) {
            names.push(name.clone());
            cols.push(panel.l0.column(c).into_owned());
        }
    }
    if on == PartialOut::BaselinePlusTimeVarying {
        let name = format!("V{s}");
        if let Some(v) = panel.v.as_ref().filter(|_| !exclude.contains(&name)) {
            names.push(name);
            cols.push(v.column(s - 1).into_owned());
        }
    }
    (names, cols)
}

/// Replace every `A_k` and `Y_k` by its OLS residual on the chosen
/// covariates. Returns the residualised panel and the covariate names used.
pub fn partial_out(panel: &PanelData, on: PartialOut, exclude: &HashSet<String>) -> Result<(PanelData, Vec<String>)> {
    let mut out = panel.clone();
    let mut used: Vec<String> = Vec::new();
    for s in 1..=panel.k() {
        let (names, cols) = partial_out_columns(panel, on, s, exclude);
        let x = DMatrix::from_columns(&cols);
        let ls = LeastSquares::new(&x, None, Some(&names))?;
        let a = panel.a_col(s);
        let ra = ls.residualize(&a);
        if ra.norm_squared() <= 1e-20 * a.norm_squared().max(1.0) {
            return Err(Error::DegenerateExposure(s));
        }
        out.a.set_column(s - 1, &ra);
        out.y.set_column(s - 1, &ls.residualize(&panel.y_col(s)));
        for name in names {
            if name != "1" && !used.contains(&name) {
                used.push(name);
            }
        }
    }
    Ok((out, used))
}

/// First-stage partial F for the instrument at time `j`: OLS of `A_j` on the
/// baseline covariates (minus `exclude`) with and without `G`.
pub fn partial_f(panel: &PanelData, j: usize, exclude: &HashSet<String>) -> Result<f64> {
    let g = panel.g.as_ref().ok_or_else(|| Error::MissingColumn("G".into()))?;
    if j == 0 || j > panel.k() {
        return Err(Error::BadTimeIndex { index: j, k: panel.k() });
    }
    let (mut names, mut cols) = partial_out_columns(panel, PartialOut::BaselineOnly, j, exclude);
    let n = panel.n();
    let q = cols.len();
    if n <= q + 1 {
        return Err(Error::TooFewRows { have: n, need: q + 2 });
    }
    let a = panel.a_col(j);
    let rss0 = LeastSquares::new(&DMatrix::from_columns(&cols), None, Some(&names))?.residualize(&a).norm_squared();
    names.push("G".into());
    cols.push(g.clone());
    let rss1 = LeastSquares::new(&DMatrix::from_columns(&cols), None, Some(&names))?.residualize(&a).norm_squared();
    Ok((rss0 - rss1) / (rss1 / (n - q - 1) as f64))
}

pub fn partial_f_all(panel: &PanelData, exclude: &HashSet<String>) -> Result<Vec<f64>> {
    (1..=panel.k()).map(|j| partial_f(panel, j, exclude)).collect()
}

struct Score<'a> {
    gc: DVector<f64>,
    a: &'a DMatrix<f64>,
    y: &'a DMatrix<f64>,
    t: &'a DMatrix<f64>,
    sigma_inv: DMatrix<f64>,
    /// `Σ g·Y_k` and `Σ g·A_j`, set when every row shares the same times.
    common: Option<(Vec<f64>, DVector<f64>, DVector<f64>)>,
}

impl<'a> Score<'a> {
    fn new(panel: &'a PanelData, sigma_inv: DMatrix<f64>) -> Result<Self> {
        let g = panel.g.as_ref().ok_or_else(|| Error::MissingColumn("G".into()))?;
        let gbar = g.mean();
        let gc = g.map(|v| v - gbar);
        if gc.norm_squared() <= 1e-20 * g.norm_squared().max(1.0) {
            return Err(Error::DegenerateInstrument);
        }
        let common = panel.common_times().map(|times| {
            let cy = panel.y.tr_mul(&gc);
            let ca = panel.a.tr_mul(&gc);
            (times, cy, ca)
        });
        Ok(Self { gc, a: &panel.a, y: &panel.y, t: &panel.t, sigma_inv, common })
    }

    fn n(&self) -> usize {
        self.gc.len()
    }

    fn k(&self) -> usize {
        self.a.ncols()
    }

    fn residuals(&self, beta: f64, alpha: f64) -> DMatrix<f64> {
        let (n, k) = (self.n(), self.k());
        DMatrix::from_fn(n, k, |i, kk| {
            let mut r = self.y[(i, kk)];
            for j in 0..=kk {
                r -= beta * decay_power(alpha, self.t[(i, kk)] - self.t[(i, j)]) * self.a[(i, j)];
            }
            r
        })
    }

    /// Mean score `S(θ)/n`.
    fn mean_score(&self, beta: f64, alpha: f64) -> DVector<f64> {
        let k = self.k();
        let raw = match &self.common {
            Some((times, cy, ca)) => DVector::from_fn(k, |kk, _| {
                let mut s = cy[kk];
                for j in 0..=kk {
                    s -= beta * decay_power(alpha, times[kk] - times[j]) * ca[j];
                }
                s
            }),
            None => self.residuals(beta, alpha).tr_mul(&self.gc),
        };
        &self.sigma_inv * raw / self.n() as f64
    }

    fn per_unit(&self, beta: f64, alpha: f64) -> DMatrix<f64> {
        let r = self.residuals(beta, alpha);
        let mut out = &r * &self.sigma_inv;
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row *= self.gc[i];
        }
        out
    }
}

const GRID_BETA: [f64; 4] = [-2.0, -1.0, 0.0, 1.0];
const GRID_ALPHA: [f64; 3] = [0.3, 0.6, 0.9];

fn minimize_score(score: &Score, seed: u64) -> (f64, f64, bool) {
    let f = |p: &DVector<f64>| score.mean_score(p[0], p[1]).norm_squared();
    let opts = SimplexOptions::default();
    let mut best: Option<crate::numkit::SimplexResult> = None;
    let consider = |r: crate::numkit::SimplexResult, best: &mut Option<crate::numkit::SimplexResult>| {
        if best.as_ref().is_none_or(|b| r.f < b.f) {
            *best = Some(r);
        }
    };
    for &b in &GRID_BETA {
        for &a in &GRID_ALPHA {
            consider(minimize_simplex(f, &DVector::from_vec(vec![b, a]), &opts), &mut best);
        }
    }
    // jittered restarts around the incumbent
    let mut rng = rng_new(seed);
    for _ in 0..3 {
        let x = best.as_ref().expect("grid is non-empty").x.clone();
        let start = DVector::from_vec(vec![x[0] + rng.random_range(-0.1..0.1), x[1] + rng.random_range(-0.1..0.1)]);
        consider(minimize_simplex(f, &start, &opts), &mut best);
    }
    let best = best.expect("grid is non-empty");
    (best.x[0], best.x[1], best.converged)
}

fn sigma_inverse(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = cholesky(cov)?;
    let inv_l = l.try_inverse().ok_or(Error::NotPsd)?;
    Ok(inv_l.transpose() * inv_l)
}

/// Single-time closed form: the Wald ratio `Σ(G−Ḡ)Y / Σ(G−Ḡ)A`, with `α`
/// reported as 1 and flagged.
fn fit_wald(panel: &PanelData, score: &Score) -> Result<IvFit> {
    let a = panel.a_col(1);
    let y = panel.y_col(1);
    let den = score.gc.dot(&a);
    if den.abs() < 1e-14 * score.n() as f64 {
        return Err(Error::DegenerateInstrument);
    }
    let beta = score.gc.dot(&y) / den;
    let per_unit = DMatrix::from_fn(score.n(), 1, |i, _| score.gc[i] * (y[i] - beta * a[i]));
    let jac = DMatrix::from_element(1, 1, -den / score.n() as f64);
    let c = sandwich(&per_unit, &jac, SandwichFlavor::IvMoorePenrose, None)?.cov;
    Ok(IvFit {
        beta,
        alpha: 1.0,
        cov_sandwich: vec![vec![c[(0, 0)], 0.0], vec![0.0, 0.0]],
        sigma_spec: SigmaSpec::Identity,
        partial_out_applied: Vec::new(),
        score_norm_at_solution: (score.gc.dot(&y) - beta * den).abs(),
        partial_f: Vec::new(),
        converged: true,
        alpha_fixed: true,
        n: panel.n(),
        times: panel.t.row(0).iter().copied().collect(),
    })
}

/// Fit `(β, α)` from the instrument score on an already prepared panel.
pub fn fit_iv_decay(panel: &PanelData, sigma: SigmaSpec, seed: u64) -> Result<IvFit> {
    let k = panel.k();
    let identity = DMatrix::identity(k, k);
    let score = Score::new(panel, identity)?;
    if k == 1 {
        return fit_wald(panel, &score);
    }
    let (mut beta, mut alpha, mut converged) = minimize_score(&score, seed);
    let score = match sigma {
        SigmaSpec::Identity => score,
        SigmaSpec::ResidualCov => {
            let cov = row_covariance(&score.residuals(beta, alpha), 1);
            let refit = Score::new(panel, sigma_inverse(&cov)?)?;
            (beta, alpha, converged) = minimize_score(&refit, seed.wrapping_add(1));
            refit
        }
    };
    let mean = score.mean_score(beta, alpha);
    let theta = DVector::from_vec(vec![beta, alpha]);
    let jac = fd_jacobian(|p| score.mean_score(p[0], p[1]), &theta);
    let cov = sandwich(&score.per_unit(beta, alpha), &jac, SandwichFlavor::IvMoorePenrose, None)?.cov;
    let score_norm = mean.norm() * score.n() as f64;
    if !beta.is_finite() || !alpha.is_finite() {
        return Err(Error::NoConvergence("IV score minimisation produced non-finite parameters".into()));
    }
    Ok(IvFit {
        beta,
        alpha,
        cov_sandwich: to_rows(&cov),
        sigma_spec: sigma,
        partial_out_applied: Vec::new(),
        score_norm_at_solution: score_norm,
        partial_f: Vec::new(),
        converged,
        alpha_fixed: false,
        n: panel.n(),
        times: panel.common_times().unwrap_or_else(|| panel.t.row(0).iter().copied().collect()),
    })
}

/// Reject effect structures the instrument cannot identify.
pub fn check_identifiable(k: usize, structure: Structure) -> Result<()> {
    if structure == Structure::Saturated && k > 1 {
        return Err(Error::UnderIdentified(format!(
            "one instrument gives {k} moments but a saturated grid has {} effects",
            k * (k + 1) / 2
        )));
    }
    Ok(())
}

/// Full pipeline: first-stage F on the original panel, optional partial-out,
/// then the score fit.
pub fn fit_iv(
    panel: &PanelData,
    sigma: SigmaSpec,
    partial: Option<PartialOut>,
    exclude: &HashSet<String>,
    seed: u64,
) -> Result<IvFit> {
    let f = partial_f_all(panel, exclude)?;
    let (work, applied) = match partial {
        Some(on) => partial_out(panel, on, exclude)?,
        None => (panel.clone(), Vec::new()),
    };
    let mut fit = fit_iv_decay(&work, sigma, seed)?;
    fit.partial_f = f;
    fit.partial_out_applied = applied;
    Ok(fit)
}
