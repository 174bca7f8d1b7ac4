//! Marginal structural models fitted by weighted least squares.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};

use crate::effects::{to_rows, FitReport, Structure};
use crate::error::{Error, Result};
use crate::numkit::{decay_power, gmm_sandwich, minimize_simplex, sandwich, JacobianSource, LeastSquares, SandwichFlavor, SimplexOptions};
use crate::panel::{history_design, PanelData};
use crate::weights::WeightSet;

/// One weighted outcome regression, kept with its exposure block.
#[derive(Debug, Clone)]
pub struct MsmOutcomeFit {
    pub k: usize,
    pub names: Vec<String>,
    pub coef: DVector<f64>,
    pub cov_naive: DMatrix<f64>,
    pub cov_sandwich: DMatrix<f64>,
}

fn check_weights(w: &DVector<f64>) -> Result<()> {
    if w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::NonPositiveWeights);
    }
    Ok(())
}

fn extra_columns(panel: &PanelData, k: usize, extra: &[String]) -> Result<Vec<(String, DVector<f64>)>> {
    if extra.is_empty() {
        return Ok(Vec::new());
    }
    let design = history_design(panel, k, &HashSet::new())?;
    extra
        .iter()
        .map(|name| {
            design
                .column(name)
                .map(|c| (name.clone(), c))
                .ok_or_else(|| Error::MissingColumn(name.clone()))
        })
        .collect()
}

fn weighted_fit(panel: &PanelData, ws: &WeightSet, k: usize, extra_adjust: &[String]) -> Result<MsmOutcomeFit> {
    if k == 0 || k > panel.k() {
        return Err(Error::BadTimeIndex { index: k, k: panel.k() });
    }
    let n = panel.n();
    let w = ws.w.column(k - 1).into_owned();
    check_weights(&w)?;
    let mut names = vec!["1".to_string()];
    let mut cols = vec![DVector::from_element(n, 1.0)];
    for j in 1..=k {
        names.push(format!("A{j}"));
        cols.push(panel.a_col(j));
    }
    for (name, col) in extra_columns(panel, k, extra_adjust)? {
        names.push(name);
        cols.push(col);
    }
    let x = DMatrix::from_columns(&cols);
    let y = panel.y_col(k);
    let ls = LeastSquares::new(&x, Some(&w), Some(&names))?;
    let fit = ls.fit(&y)?;
    let p = x.ncols();
    let sigma2 = fit.residuals.iter().zip(w.iter()).map(|(e, wi)| wi * e * e).sum::<f64>() / fit.dof as f64;
    let cov_naive = &fit.xtwx_inv * sigma2;

    let mut per_unit = DMatrix::zeros(n, p);
    for i in 0..n {
        let s = w[i] * fit.residuals[i];
        for c in 0..p {
            per_unit[(i, c)] = s * x[(i, c)];
        }
    }
    let mut wx = x.clone();
    for (i, mut row) in wx.row_iter_mut().enumerate() {
        row *= w[i];
    }
    let jac = -(x.transpose() * wx) / n as f64;
    let cov_sandwich = sandwich(&per_unit, &jac, SandwichFlavor::Hc1, None)?.cov;
    Ok(MsmOutcomeFit { k, names, coef: fit.coef, cov_naive, cov_sandwich })
}

/// Report containing only the exposure block `A_1..A_k` of a full fit.
fn exposure_block(fit: &MsmOutcomeFit) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
    let idx: Vec<usize> = (1..=fit.k).collect();
    let coef = idx.iter().map(|&i| fit.coef[i]).collect();
    let pick = |m: &DMatrix<f64>| m.select_rows(&idx).select_columns(&idx);
    (coef, pick(&fit.cov_naive), pick(&fit.cov_sandwich))
}

/// WLS of `Y_k` on `(1, A_1, …, A_k)` plus any `extra_adjust` history
/// columns, weighted by the cumulative weights at `k`. The report carries
/// the exposure coefficients only.
pub fn fit_msm(panel: &PanelData, ws: &WeightSet, k: usize, extra_adjust: &[String]) -> Result<FitReport> {
    let fit = weighted_fit(panel, ws, k, extra_adjust)?;
    let (coef, naive, sand) = exposure_block(&fit);
    Ok(FitReport {
        estimator: "iptw".into(),
        structure: Structure::Saturated,
        names: (1..=k).map(|j| format!("beta_{k}({j})")).collect(),
        coef,
        index: (1..=k).map(|j| (k, j)).collect(),
        cov_naive: Some(to_rows(&naive)),
        cov_sandwich: to_rows(&sand),
        n: panel.n(),
        times: panel.common_times().unwrap_or_default(),
        flags: Vec::new(),
    })
}

/// All outcomes `1..=K`, stacked with a block-diagonal covariance (outcome
/// regressions are fitted separately, so cross-outcome covariance is left
/// at zero). `extra_adjust[k-1]` lists extra columns for outcome `k`.
pub fn fit_msm_all(panel: &PanelData, ws: &WeightSet, extra_adjust: Option<&[Vec<String>]>) -> Result<FitReport> {
    let kmax = panel.k();
    let total = kmax * (kmax + 1) / 2;
    let mut coef = Vec::with_capacity(total);
    let mut index = Vec::with_capacity(total);
    let mut names = Vec::with_capacity(total);
    let mut naive = DMatrix::zeros(total, total);
    let mut sand = DMatrix::zeros(total, total);
    let mut offset = 0;
    for k in 1..=kmax {
        let extra = extra_adjust.and_then(|e| e.get(k - 1)).map(Vec::as_slice).unwrap_or(&[]);
        let fit = weighted_fit(panel, ws, k, extra)?;
        let (c, nv, sw) = exposure_block(&fit);
        naive.view_mut((offset, offset), (k, k)).copy_from(&nv);
        sand.view_mut((offset, offset), (k, k)).copy_from(&sw);
        for (j, v) in c.into_iter().enumerate() {
            coef.push(v);
            index.push((k, j + 1));
            names.push(format!("beta_{k}({})", j + 1));
        }
        offset += k;
    }
    let mut flags = Vec::new();
    if ws.fallback {
        flags.push("balance_fallback".into());
    }
    Ok(FitReport {
        estimator: "iptw".into(),
        structure: Structure::Saturated,
        names,
        coef,
        index,
        cov_naive: Some(to_rows(&naive)),
        cov_sandwich: to_rows(&sand),
        n: panel.n(),
        times: panel.common_times().unwrap_or_default(),
        flags,
    })
}

struct DecayProblem {
    /// Per outcome `s ≤ k`: weights, outcome, and lags `t_s − t_j` per row.
    w: Vec<DVector<f64>>,
    y: Vec<DVector<f64>>,
    a: DMatrix<f64>,
    t: DMatrix<f64>,
}

impl DecayProblem {
    fn mu_no_intercept(&self, s: usize, i: usize, beta: f64, alpha: f64) -> f64 {
        (0..=s).map(|j| beta * decay_power(alpha, self.t[(i, s)] - self.t[(i, j)]) * self.a[(i, j)]).sum()
    }

    /// Weighted-mean intercept for outcome `s` given `(β, α)`.
    fn intercept(&self, s: usize, beta: f64, alpha: f64) -> f64 {
        let w = &self.w[s];
        let num: f64 = (0..w.len()).map(|i| w[i] * (self.y[s][i] - self.mu_no_intercept(s, i, beta, alpha))).sum();
        num / w.sum()
    }

    fn profiled_loss(&self, beta: f64, alpha: f64) -> f64 {
        let mut loss = 0.0;
        for s in 0..self.w.len() {
            let c = self.intercept(s, beta, alpha);
            for i in 0..self.w[s].len() {
                let e = self.y[s][i] - c - self.mu_no_intercept(s, i, beta, alpha);
                loss += self.w[s][i] * e * e;
            }
        }
        loss / self.a.nrows() as f64
    }

    /// Per-unit score contributions for `(c_1..c_k, β, α)`.
    fn per_unit(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let k = self.w.len();
        let n = self.a.nrows();
        let (beta, alpha) = (theta[k], theta[k + 1]);
        let mut out = DMatrix::zeros(n, k + 2);
        for s in 0..k {
            for i in 0..n {
                let mut d_beta = 0.0;
                let mut d_alpha = 0.0;
                for j in 0..=s {
                    let lag = self.t[(i, s)] - self.t[(i, j)];
                    d_beta += decay_power(alpha, lag) * self.a[(i, j)];
                    if lag != 0.0 {
                        d_alpha += beta * lag * decay_power(alpha, lag - 1.0) * self.a[(i, j)];
                    }
                }
                let e = self.y[s][i] - theta[s] - beta * d_beta;
                let we = self.w[s][i] * e;
                out[(i, s)] = we;
                out[(i, k)] += we * d_beta;
                out[(i, k + 1)] += we * d_alpha;
            }
        }
        out
    }
}

/// Decay-structured MSM `η_s(j) = β·α^(t_s − t_j)` pooled over outcomes
/// `1..=k`, each with its own intercept. Needs `k ≥ 2` for `α` to be
/// identified.
pub fn fit_msm_decay(panel: &PanelData, ws: &WeightSet, k: usize) -> Result<FitReport> {
    if k < 2 || k > panel.k() {
        return Err(Error::UnderIdentified(format!("decay MSM needs 2 ≤ k ≤ {}, got {k}", panel.k())));
    }
    let mut w = Vec::with_capacity(k);
    let mut y = Vec::with_capacity(k);
    for s in 1..=k {
        let col = ws.w.column(s - 1).into_owned();
        check_weights(&col)?;
        w.push(col);
        y.push(panel.y_col(s));
    }
    let prob = DecayProblem { w, y, a: panel.a.columns(0, k).into_owned(), t: panel.t.columns(0, k).into_owned() };

    // start from the saturated fit at the last outcome
    let sat = weighted_fit(panel, ws, k, &[])?;
    let b_last = sat.coef[k];
    let b_prev = sat.coef[k - 1];
    let alpha0 = if b_last.abs() > 1e-8 { (b_prev / b_last).clamp(-0.99, 1.5) } else { 0.5 };
    let opts = SimplexOptions::default();
    let f = |p: &DVector<f64>| prob.profiled_loss(p[0], p[1]);
    let mut best = minimize_simplex(f, &DVector::from_vec(vec![b_last, alpha0]), &opts);
    for (b0, a0) in [(b_last, 0.5), (-1.0, 0.9), (1.0, 0.5)] {
        let r = minimize_simplex(f, &DVector::from_vec(vec![b0, a0]), &opts);
        if r.f < best.f {
            best = r;
        }
    }
    let (beta, alpha) = (best.x[0], best.x[1]);
    let mut theta = DVector::zeros(k + 2);
    for s in 0..k {
        theta[s] = prob.intercept(s, beta, alpha);
    }
    theta[k] = beta;
    theta[k + 1] = alpha;
    let cov = gmm_sandwich(|t| prob.per_unit(t), &theta, JacobianSource::FiniteDifference, SandwichFlavor::Gmm, None)?.cov;
    let block = cov.view((k, k), (2, 2)).into_owned();
    let mut flags = Vec::new();
    if !best.converged {
        flags.push("not_converged".into());
    }
    if ws.fallback {
        flags.push("balance_fallback".into());
    }
    Ok(FitReport {
        estimator: "iptw".into(),
        structure: Structure::Decay,
        names: vec!["beta".into(), "alpha".into()],
        coef: vec![beta, alpha],
        index: Vec::new(),
        cov_naive: None,
        cov_sandwich: to_rows(&block),
        n: panel.n(),
        times: panel.common_times().unwrap_or_else(|| panel.t.row(0).iter().copied().collect()),
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn panel_from(a: DMatrix<f64>, y: DMatrix<f64>) -> PanelData {
        let (n, k) = a.shape();
        PanelData {
            ids: (0..n).map(|i| i.to_string()).collect(),
            a,
            y,
            t: DMatrix::from_fn(n, k, |_, c| c as f64 + 1.0),
            l0: DMatrix::zeros(n, 0),
            l0_names: Vec::new(),
            v: None,
            g: None,
            latent: BTreeMap::new(),
        }
    }

    #[test]
    fn unit_weights_k1_is_ols_slope() {
        let a = [0.3, -1.2, 0.8, 2.1, -0.4, 1.5, -2.0, 0.0];
        let y = [1.0, -0.5, 2.0, 3.5, 0.2, 2.9, -2.2, 0.4];
        let panel = panel_from(DMatrix::from_column_slice(8, 1, &a), DMatrix::from_column_slice(8, 1, &y));
        let ws = WeightSet::unit(8, 1);
        let r = fit_msm(&panel, &ws, 1, &[]).unwrap();
        let ma = a.iter().sum::<f64>() / 8.0;
        let my = y.iter().sum::<f64>() / 8.0;
        let cov: f64 = a.iter().zip(&y).map(|(x, z)| (x - ma) * (z - my)).sum();
        let var: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        assert!((r.coef[0] - cov / var).abs() < 1e-12);
    }

    fn decay_panel(n: usize, beta: f64, alpha: f64) -> PanelData {
        let a = DMatrix::from_fn(n, 3, |i, c| ((i * 7 + c * 13) % 11) as f64 / 3.0 - 1.5 + 0.1 * c as f64);
        let y = DMatrix::from_fn(n, 3, |i, s| {
            0.3 + (0..=s).map(|j| beta * alpha.powi((s - j) as i32) * a[(i, j)]).sum::<f64>()
        });
        panel_from(a, y)
    }

    #[test]
    fn noise_free_decay_recovered() {
        let panel = decay_panel(60, -1.1, 0.8);
        let ws = WeightSet::unit(60, 3);
        let r = fit_msm_decay(&panel, &ws, 3).unwrap();
        assert!((r.coef[0] + 1.1).abs() < 1e-4, "{:?}", r.coef);
        assert!((r.coef[1] - 0.8).abs() < 1e-4, "{:?}", r.coef);
    }

    #[test]
    fn alpha_one_gives_flat_saturated_coefficients() {
        let panel = decay_panel(60, -0.7, 1.0);
        let ws = WeightSet::unit(60, 3);
        let r = fit_msm(&panel, &ws, 3, &[]).unwrap();
        for c in &r.coef {
            assert!((c + 0.7).abs() < 1e-10);
        }
    }

    #[test]
    fn stacked_layout_and_block_diagonal() {
        let panel = decay_panel(40, -1.0, 0.5);
        let ws = WeightSet::unit(40, 3);
        let r = fit_msm_all(&panel, &ws, None).unwrap();
        assert_eq!(r.coef.len(), 6);
        assert_eq!(r.index[3], (3, 1));
        let c = r.cov_sandwich();
        assert_eq!(c[(0, 3)], 0.0);
    }

    #[test]
    fn negative_weight_rejected() {
        let panel = decay_panel(20, -1.0, 0.5);
        let mut ws = WeightSet::unit(20, 3);
        ws.w[(3, 0)] = -1.0;
        assert!(matches!(fit_msm(&panel, &ws, 1, &[]), Err(Error::NonPositiveWeights)));
    }
}
