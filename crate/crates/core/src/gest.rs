//! G-estimation of structural nested mean models under no unmeasured
//! confounding.
//!
//! For each outcome `k` and exposure time `j ≤ k` the estimating equation is
//! `E[R_j·(Y_k − Σ_{s=j..k} β_k(s)·A_s)] = 0` with `R_j` the OLS residual of
//! `A_j` on its history design. The efficient flavour also residualises the
//! blipped-down outcome on `H_j`. Both are linear in the effects, so the
//! saturated system is solved exactly.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::effects::{to_rows, EffectGrid, FitReport, Structure};
use crate::error::{Error, Result};
use crate::numkit::linalg::row_covariance;
use crate::numkit::{
    cholesky, decay_power, gmm_sandwich, minimize_simplex, solve_linear, JacobianSource, LeastSquares, SandwichFlavor,
    SimplexOptions,
};
use crate::panel::{history_design, PanelData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GestFlavor {
    Sequential,
    Basic,
    Efficient,
}

impl std::str::FromStr for GestFlavor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(GestFlavor::Sequential),
            "basic" => Ok(GestFlavor::Basic),
            "efficient" => Ok(GestFlavor::Efficient),
            other => Err(Error::InvalidConfig(format!("unknown G-estimation flavor `{other}`"))),
        }
    }
}

/// Moment block for one `(k, j)` pair.
#[derive(Debug, Clone)]
pub struct MomentBlock {
    pub k: usize,
    pub j: usize,
    /// Residualised exposure `R_j`.
    pub z: DVector<f64>,
    /// Outcome `Y_k` (basic) or its residual on `H_j` (efficient).
    pub y: DVector<f64>,
    /// Columns for `s = j..=k`: `A_s` (basic) or residuals on `H_j` (efficient).
    pub x: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct MomentSystem {
    pub k: usize,
    pub flavor: GestFlavor,
    /// In effect-grid order.
    pub blocks: Vec<MomentBlock>,
    pub times: DMatrix<f64>,
}

impl MomentSystem {
    pub fn build(panel: &PanelData, flavor: GestFlavor, exclude: &HashSet<String>) -> Result<Self> {
        let kmax = panel.k();
        let mut fits = Vec::with_capacity(kmax);
        let mut resid_a = Vec::with_capacity(kmax);
        for j in 1..=kmax {
            let design = history_design(panel, j, exclude)?;
            let ls = LeastSquares::new(&design.x, None, Some(&design.names))?;
            let r = ls.residualize(&panel.a_col(j));
            if r.norm_squared() <= 1e-20 * panel.a_col(j).norm_squared().max(1.0) {
                return Err(Error::DegenerateExposure(j));
            }
            resid_a.push(r);
            fits.push(ls);
        }
        let mut blocks = Vec::with_capacity(EffectGrid::len_for(kmax));
        for k in 1..=kmax {
            for j in 1..=k {
                let z = resid_a[j - 1].clone();
                let width = k - j + 1;
                let (y, x) = match flavor {
                    GestFlavor::Efficient => {
                        let ls = &fits[j - 1];
                        let y = ls.residualize(&panel.y_col(k));
                        let cols: Vec<DVector<f64>> = (j..=k).map(|s| ls.residualize(&panel.a_col(s))).collect();
                        (y, DMatrix::from_columns(&cols))
                    }
                    _ => (panel.y_col(k), panel.a.columns(j - 1, width).into_owned()),
                };
                blocks.push(MomentBlock { k, j, z, y, x });
            }
        }
        Ok(Self { k: kmax, flavor, blocks, times: panel.t.clone() })
    }

    pub fn n(&self) -> usize {
        self.blocks[0].z.len()
    }

    /// Per-unit moments given `coef(i, k, s) = β_k(s)` for row `i`.
    fn per_unit_with<F: Fn(usize, usize, usize) -> f64>(&self, coef: F) -> DMatrix<f64> {
        let n = self.n();
        let mut out = DMatrix::zeros(n, self.blocks.len());
        for (b, blk) in self.blocks.iter().enumerate() {
            for i in 0..n {
                let mut e = blk.y[i];
                for (c, s) in (blk.j..=blk.k).enumerate() {
                    e -= coef(i, blk.k, s) * blk.x[(i, c)];
                }
                out[(i, b)] = blk.z[i] * e;
            }
        }
        out
    }

    /// Per-unit moments at a saturated grid.
    pub fn per_unit_saturated(&self, grid: &EffectGrid) -> DMatrix<f64> {
        self.per_unit_with(|_, k, s| grid.get(k, s))
    }

    /// Per-unit moments at decay parameters, using each row's own times.
    pub fn per_unit_decay(&self, beta: f64, alpha: f64) -> DMatrix<f64> {
        let t = &self.times;
        self.per_unit_with(|i, k, s| beta * decay_power(alpha, t[(i, k - 1)] - t[(i, s - 1)]))
    }

    /// Linear form of the mean moments, `m(β) = b − M·β` over the grid.
    pub fn linear_form(&self) -> (DMatrix<f64>, DVector<f64>) {
        let q = self.blocks.len();
        let n = self.n() as f64;
        let mut m = DMatrix::zeros(q, q);
        let mut b = DVector::zeros(q);
        for (r, blk) in self.blocks.iter().enumerate() {
            b[r] = blk.z.dot(&blk.y) / n;
            for (c, s) in (blk.j..=blk.k).enumerate() {
                m[(r, EffectGrid::index(blk.k, s))] = blk.z.dot(&blk.x.column(c)) / n;
            }
        }
        (m, b)
    }
}

/// Backward recursion for outcome `k`: regress the blipped-down outcome on
/// `(A_j, H_j)`, peel off `β̂_k(j)·A_j`, step to `j − 1`.
pub fn fit_sequential(panel: &PanelData, k: usize, exclude: &HashSet<String>) -> Result<Vec<f64>> {
    if k == 0 || k > panel.k() {
        return Err(Error::BadTimeIndex { index: k, k: panel.k() });
    }
    let mut y = panel.y_col(k);
    let mut out = vec![0.0; k];
    for j in (1..=k).rev() {
        let h = history_design(panel, j, exclude)?;
        let a = panel.a_col(j);
        let mut names = vec![format!("A{j}")];
        names.extend(h.names.iter().cloned());
        let x = DMatrix::from_fn(panel.n(), h.x.ncols() + 1, |i, c| if c == 0 { a[i] } else { h.x[(i, c - 1)] });
        let ls = LeastSquares::new(&x, None, Some(&names))?;
        let beta = ls.coef(&y)[0];
        out[j - 1] = beta;
        y -= &a * beta;
    }
    Ok(out)
}

/// Sequential estimates for every outcome as a grid.
pub fn fit_sequential_grid(panel: &PanelData, exclude: &HashSet<String>) -> Result<EffectGrid> {
    let mut values = Vec::with_capacity(EffectGrid::len_for(panel.k()));
    for k in 1..=panel.k() {
        values.extend(fit_sequential(panel, k, exclude)?);
    }
    EffectGrid::new(panel.k(), values)
}

fn estimator_tag(flavor: GestFlavor) -> String {
    match flavor {
        GestFlavor::Sequential => "gest-sequential",
        GestFlavor::Basic => "gest-basic",
        GestFlavor::Efficient => "gest-efficient",
    }
    .into()
}

/// G-estimation with the requested moment flavour and effect structure.
///
/// The sequential flavour reports the basic-moment sandwich, since its point
/// estimates solve the same equations.
pub fn fit_gest(panel: &PanelData, flavor: GestFlavor, structure: Structure, exclude: &HashSet<String>) -> Result<FitReport> {
    match structure {
        Structure::Saturated => fit_saturated(panel, flavor, exclude),
        Structure::Decay => {
            if flavor == GestFlavor::Sequential {
                return Err(Error::InvalidConfig("the sequential flavor only supports saturated effects".into()));
            }
            fit_decay(panel, flavor, exclude)
        }
    }
}

pub fn fit_gmm_basic(panel: &PanelData, structure: Structure, exclude: &HashSet<String>) -> Result<FitReport> {
    fit_gest(panel, GestFlavor::Basic, structure, exclude)
}

pub fn fit_gmm_efficient(panel: &PanelData, structure: Structure, exclude: &HashSet<String>) -> Result<FitReport> {
    fit_gest(panel, GestFlavor::Efficient, structure, exclude)
}

fn fit_saturated(panel: &PanelData, flavor: GestFlavor, exclude: &HashSet<String>) -> Result<FitReport> {
    let moment_flavor = if flavor == GestFlavor::Efficient { GestFlavor::Efficient } else { GestFlavor::Basic };
    let sys = MomentSystem::build(panel, moment_flavor, exclude)?;
    let (m, b) = sys.linear_form();
    let grid = if flavor == GestFlavor::Sequential {
        fit_sequential_grid(panel, exclude)?
    } else {
        EffectGrid::new(sys.k, solve_linear(&m, &b)?.iter().copied().collect())?
    };
    let per_unit = sys.per_unit_saturated(&grid);
    let theta = DVector::from_row_slice(grid.values());
    let cov = gmm_sandwich(|_| per_unit.clone(), &theta, JacobianSource::Analytic(-m), SandwichFlavor::Gmm, None)?.cov;
    Ok(FitReport {
        estimator: estimator_tag(flavor),
        structure: Structure::Saturated,
        names: EffectGrid::labels(sys.k),
        coef: grid.values().to_vec(),
        index: EffectGrid::pairs(sys.k),
        cov_naive: None,
        cov_sandwich: to_rows(&cov),
        n: panel.n(),
        times: panel.common_times().unwrap_or_default(),
        flags: Vec::new(),
    })
}

fn quad_form(m: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    (m.transpose() * w * m)[(0, 0)]
}

fn minimize_decay(sys: &MomentSystem, w: &DMatrix<f64>, starts: &[(f64, f64)]) -> (DVector<f64>, bool) {
    let f = |p: &DVector<f64>| {
        let m = sys.per_unit_decay(p[0], p[1]).row_mean().transpose();
        quad_form(&m, w)
    };
    let opts = SimplexOptions::default();
    let mut best: Option<crate::numkit::SimplexResult> = None;
    for &(b0, a0) in starts {
        let r = minimize_simplex(f, &DVector::from_vec(vec![b0, a0]), &opts);
        if best.as_ref().is_none_or(|bst| r.f < bst.f) {
            best = Some(r);
        }
    }
    let best = best.expect("at least one start");
    (best.x, best.converged)
}

/// Inverse of a moment covariance; adds a `1e-8` ridge when singular.
fn inverse_or_ridge(omega: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let q = omega.nrows();
    let try_inv = |m: &DMatrix<f64>| {
        cholesky(m).ok().and_then(|l| {
            let inv_l = l.try_inverse()?;
            Some(inv_l.transpose() * inv_l)
        })
    };
    match try_inv(omega).filter(|m| m.iter().all(|v| v.is_finite())) {
        Some(inv) => (inv, false),
        None => {
            let ridged = omega + DMatrix::identity(q, q) * 1e-8;
            let inv = try_inv(&ridged).unwrap_or_else(|| crate::numkit::pinv(&ridged));
            (inv, true)
        }
    }
}

fn fit_decay(panel: &PanelData, flavor: GestFlavor, exclude: &HashSet<String>) -> Result<FitReport> {
    let sys = MomentSystem::build(panel, flavor, exclude)?;
    if sys.k < 2 {
        return Err(Error::UnderIdentified("decay structure needs at least two time points".into()));
    }
    let q = sys.blocks.len();
    // saturated solution seeds the search
    let (m, b) = sys.linear_form();
    let sat = EffectGrid::new(sys.k, solve_linear(&m, &b)?.iter().copied().collect())?;
    let b0 = sat.get(sys.k, sys.k);
    let a0 = if b0.abs() > 1e-8 { (sat.get(sys.k, sys.k - 1) / b0).clamp(-0.99, 1.5) } else { 0.5 };
    let starts = [(b0, a0), (b0, 0.5), (-1.0, 0.9), (1.0, 0.5)];

    let identity = DMatrix::identity(q, q);
    let (mut theta, mut converged) = minimize_decay(&sys, &identity, &starts);
    let mut weight = identity;
    let mut flags = Vec::new();
    if flavor == GestFlavor::Efficient {
        let omega = row_covariance(&sys.per_unit_decay(theta[0], theta[1]), 0);
        let (inv, ridged) = inverse_or_ridge(&omega);
        if ridged {
            flags.push("omega_ridge".into());
        }
        weight = inv;
        let (t2, c2) = minimize_decay(&sys, &weight, &[(theta[0], theta[1])]);
        theta = t2;
        converged = c2;
    }
    if !converged {
        flags.push("not_converged".into());
    }
    let cov = gmm_sandwich(
        |p| sys.per_unit_decay(p[0], p[1]),
        &theta,
        JacobianSource::FiniteDifference,
        SandwichFlavor::Gmm,
        Some(&weight),
    )?
    .cov;
    Ok(FitReport {
        estimator: estimator_tag(flavor),
        structure: Structure::Decay,
        names: vec!["beta".into(), "alpha".into()],
        coef: vec![theta[0], theta[1]],
        index: Vec::new(),
        cov_naive: None,
        cov_sandwich: to_rows(&cov),
        n: panel.n(),
        times: panel.common_times().unwrap_or_else(|| panel.t.row(0).iter().copied().collect()),
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{scenario_preset, simulate_panel};
    use std::collections::BTreeMap;

    fn small(name: &str, n: usize, seed: u64) -> PanelData {
        let mut cfg = scenario_preset(name).unwrap();
        cfg.n = n;
        simulate_panel(&cfg, seed).unwrap()
    }

    #[test]
    fn three_way_equivalence() {
        let panel = small("design1a", 800, 3);
        let none = HashSet::new();
        let seq = fit_gest(&panel, GestFlavor::Sequential, Structure::Saturated, &none).unwrap();
        let basic = fit_gmm_basic(&panel, Structure::Saturated, &none).unwrap();
        let eff = fit_gmm_efficient(&panel, Structure::Saturated, &none).unwrap();
        for i in 0..6 {
            assert!((seq.coef[i] - basic.coef[i]).abs() < 1e-8);
            assert!((eff.coef[i] - basic.coef[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn moments_vanish_at_solution() {
        let panel = small("design1b", 600, 5);
        let none = HashSet::new();
        for flavor in [GestFlavor::Basic, GestFlavor::Efficient] {
            let sys = MomentSystem::build(&panel, flavor, &none).unwrap();
            let fit = fit_gest(&panel, flavor, Structure::Saturated, &none).unwrap();
            let m = sys.per_unit_saturated(&fit.grid().unwrap()).row_mean();
            assert!(m.amax() < 1e-8);
        }
    }

    #[test]
    fn residual_orthogonal_to_history() {
        let panel = small("design1a", 300, 9);
        let none = HashSet::new();
        let sys = MomentSystem::build(&panel, GestFlavor::Basic, &none).unwrap();
        for blk in sys.blocks.iter().filter(|b| b.k == b.j) {
            let h = history_design(&panel, blk.j, &none).unwrap();
            let dots = h.x.transpose() * &blk.z;
            assert!(dots.amax() < 1e-8 * panel.n() as f64);
        }
    }

    #[test]
    fn blip_down_telescopes() {
        let panel = small("design1b", 200, 2);
        let beta = [-1.0, -0.7, -0.4];
        let mut y = panel.y_col(3);
        for s in (1..=3).rev() {
            y -= panel.a_col(s) * beta[s - 1];
        }
        let direct = panel.y_col(3) - panel.a_col(1) * beta[0] - panel.a_col(2) * beta[1] - panel.a_col(3) * beta[2];
        assert!((y - direct).amax() < 1e-12);
    }

    #[test]
    fn intercept_only_history_is_covariance_ratio() {
        let a = [0.3, -1.2, 0.8, 2.1, -0.4, 1.5, -2.0, 0.0];
        let y = [1.0, -0.5, 2.0, 3.5, 0.2, 2.9, -2.2, 0.4];
        let panel = PanelData {
            ids: (0..8).map(|i| i.to_string()).collect(),
            a: DMatrix::from_column_slice(8, 1, &a),
            y: DMatrix::from_column_slice(8, 1, &y),
            t: DMatrix::from_element(8, 1, 1.0),
            l0: DMatrix::zeros(8, 0),
            l0_names: Vec::new(),
            v: None,
            g: None,
            latent: BTreeMap::new(),
        };
        let fit = fit_gmm_basic(&panel, Structure::Saturated, &HashSet::new()).unwrap();
        let ma = a.iter().sum::<f64>() / 8.0;
        let my = y.iter().sum::<f64>() / 8.0;
        let cov: f64 = a.iter().zip(&y).map(|(x, z)| (x - ma) * (z - my)).sum();
        let var: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        assert!((fit.coef[0] - cov / var).abs() < 1e-12);
    }

    /// Panel whose outcome noise is exactly orthogonal to every residualised
    /// exposure, so the estimating equations hold without sampling error.
    fn orthogonal_noise_panel(n: usize, truth: &EffectGrid) -> PanelData {
        use crate::numkit::rng::{rng_new, standard_normal};
        let mut rng = rng_new(17);
        let l = DVector::from_fn(n, |_, _| standard_normal(&mut rng));
        let mut panel = PanelData {
            ids: (0..n).map(|i| i.to_string()).collect(),
            a: DMatrix::zeros(n, 3),
            y: DMatrix::zeros(n, 3),
            t: DMatrix::from_fn(n, 3, |_, c| c as f64 + 1.0),
            l0: DMatrix::from_column_slice(n, 1, l.as_slice()),
            l0_names: vec!["L".into()],
            v: None,
            g: None,
            latent: BTreeMap::new(),
        };
        let mut resid: Vec<DVector<f64>> = Vec::new();
        for k in 1..=3 {
            let a = DVector::from_fn(n, |i, _| {
                let lag = if k > 1 { 0.2 * panel.a[(i, k - 2)] + 0.1 * panel.y[(i, k - 2)] } else { 0.0 };
                0.3 * l[i] + lag + standard_normal(&mut rng)
            });
            panel.a.set_column(k - 1, &a);
            let h = history_design(&panel, k, &HashSet::new()).unwrap();
            resid.push(LeastSquares::new(&h.x, None, None).unwrap().residualize(&a));
            let z = DMatrix::from_columns(&resid);
            let raw = DVector::from_fn(n, |_, _| standard_normal(&mut rng));
            let e = LeastSquares::new(&z, None, None).unwrap().residualize(&raw);
            let y = DVector::from_fn(n, |i, _| {
                (1..=k).map(|j| truth.get(k, j) * panel.a[(i, j - 1)]).sum::<f64>() + 0.5 * l[i] + e[i]
            });
            panel.y.set_column(k - 1, &y);
        }
        panel
    }

    #[test]
    fn noise_free_grid_recovered() {
        let truth = EffectGrid::from_decay(-1.1, 0.95, &[1.0, 2.0, 3.0]);
        let panel = orthogonal_noise_panel(200, &truth);
        let none = HashSet::new();
        let seq = fit_sequential_grid(&panel, &none).unwrap();
        let eff = fit_gmm_efficient(&panel, Structure::Saturated, &none).unwrap();
        for ((a, b), c) in seq.values().iter().zip(truth.values()).zip(&eff.coef) {
            assert!((a - b).abs() < 1e-8);
            assert!((c - b).abs() < 1e-8);
        }
    }

    #[test]
    fn decay_fit_near_truth() {
        let panel = small("design1b", 3000, 11);
        let fit = fit_gmm_efficient(&panel, Structure::Decay, &HashSet::new()).unwrap();
        assert!((fit.coef[0] + 1.1).abs() < 0.05, "{:?}", fit.coef);
        assert!((fit.coef[1] - 0.95).abs() < 0.05, "{:?}", fit.coef);
    }

    #[test]
    fn analytic_jacobian_matches_finite_difference() {
        let panel = small("design1b", 300, 1);
        let sys = MomentSystem::build(&panel, GestFlavor::Efficient, &HashSet::new()).unwrap();
        let (m, _) = sys.linear_form();
        let theta = DVector::from_element(6, -0.5);
        let fd = crate::numkit::fd_jacobian(
            |t| sys.per_unit_saturated(&EffectGrid::new(3, t.iter().copied().collect()).unwrap()).row_mean().transpose(),
            &theta,
        );
        assert!((fd + m).amax() < 1e-6);
    }
}
