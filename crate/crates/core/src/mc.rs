//! Monte Carlo experiments: simulate, fit every estimator on the same
//! panel, repeat, summarise.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::effects::{FitReport, Structure};
use crate::error::{Error, Result};
use crate::estimand::contrast_delta;
use crate::gest::{fit_gest, GestFlavor};
use crate::iv::{fit_iv, PartialOut, SigmaSpec};
use crate::msm::fit_msm_all;
use crate::numkit::fd_jacobian;
use crate::panel::PanelData;
use crate::simgen::{simulate_panel, EffectSpec, ScenarioConfig};
use crate::weights::{balance_table, fit_weights_balanced, fit_weights_gaussian, flagged_covariates, weight_diagnostics, WeightDiagRow, WeightSet};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "LONGICAUSAL_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimator {
    /// Exact-balance weights.
    Iptw,
    IptwGaussian,
    GestSequential,
    GestBasic,
    GestEfficient,
    Iv,
}

impl Estimator {
    pub const ALL: [Estimator; 6] = [
        Estimator::Iptw,
        Estimator::IptwGaussian,
        Estimator::GestSequential,
        Estimator::GestBasic,
        Estimator::GestEfficient,
        Estimator::Iv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Iptw => "iptw",
            Estimator::IptwGaussian => "iptw-gaussian",
            Estimator::GestSequential => "gest-sequential",
            Estimator::GestBasic => "gest-basic",
            Estimator::GestEfficient => "gest-efficient",
            Estimator::Iv => "iv",
        }
    }

    fn is_iptw(self) -> bool {
        matches!(self, Estimator::Iptw | Estimator::IptwGaussian)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown estimator `{s}`")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McOptions {
    pub iv_sigma: SigmaSpec,
    /// Residualise on baseline covariates before the IV fit. Designs flagged
    /// `wrong_partial_out` also residualise on the time-varying covariates.
    pub iv_partial_out: bool,
    /// Add covariates flagged by the balance table to the IPTW outcome models.
    pub iptw_adjust_flagged: bool,
    pub level: f64,
    /// Abort when more than this share of replications fails for any estimator.
    pub max_failure_rate: f64,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            iv_sigma: SigmaSpec::Identity,
            iv_partial_out: true,
            iptw_adjust_flagged: true,
            level: 0.95,
            max_failure_rate: 0.2,
        }
    }
}

/// One estimator's output in one replication: parameters followed by the
/// `Δ_k` contrasts for unit versus zero sustained exposure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepFit {
    pub estimates: Vec<f64>,
    pub se_sandwich: Vec<f64>,
    pub se_naive: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepOutcome {
    pub rep: usize,
    pub seed: u64,
    /// Parallel to the estimator list; `Err` holds the failure message.
    pub fits: Vec<std::result::Result<RepFit, String>>,
    pub weight_diag: Option<Vec<WeightDiagRow>>,
    pub partial_f: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub truth: f64,
    pub mean: f64,
    pub mae: f64,
    pub rmse: f64,
    pub emp_sd: f64,
    pub mean_se: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSummary {
    pub estimator: String,
    pub parameter: String,
    pub truth: f64,
    pub mean: f64,
    pub mae: f64,
    pub rmse: f64,
    pub emp_sd: f64,
    pub mean_se_sandwich: f64,
    pub mean_se_naive: Option<f64>,
    pub coverage_sandwich: f64,
    pub coverage_naive: Option<f64>,
    pub n_reps: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McSummary {
    pub design: String,
    pub n: usize,
    pub seed: u64,
    pub n_reps: usize,
    pub estimators: Vec<Estimator>,
    pub params: Vec<Vec<String>>,
    pub reps: Vec<RepOutcome>,
    pub summary: Vec<ParamSummary>,
}

impl McSummary {
    pub fn row(&self, estimator: Estimator, parameter: &str) -> Option<&ParamSummary> {
        self.summary.iter().find(|r| r.estimator == estimator.name() && r.parameter == parameter)
    }

    /// Successful estimates of one parameter across replications.
    pub fn estimates(&self, estimator: Estimator, parameter: &str) -> Vec<f64> {
        let Some(e) = self.estimators.iter().position(|x| *x == estimator) else {
            return Vec::new();
        };
        let Some(p) = self.params[e].iter().position(|x| x == parameter) else {
            return Vec::new();
        };
        self.reps.iter().filter_map(|r| r.fits[e].as_ref().ok().map(|f| f.estimates[p])).collect()
    }
}

/// Two-sided normal critical value for a confidence level.
pub fn z_for_level(level: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(1.0 - (1.0 - level) / 2.0)
}

/// Accuracy and coverage metrics per column of an `R×q` estimate matrix.
pub fn summarize(estimates: &DMatrix<f64>, ses: &DMatrix<f64>, truth: &[f64], level: f64) -> Result<Vec<MetricRow>> {
    let (r, q) = estimates.shape();
    if ses.shape() != (r, q) || truth.len() != q {
        return Err(Error::DimensionMismatch(format!(
            "estimates {r}×{q}, ses {}×{}, truth {}",
            ses.nrows(),
            ses.ncols(),
            truth.len()
        )));
    }
    if r == 0 {
        return Err(Error::TooFewRows { have: 0, need: 1 });
    }
    let z = z_for_level(level);
    let rf = r as f64;
    Ok((0..q)
        .map(|c| {
            let est = estimates.column(c);
            let se = ses.column(c);
            let t = truth[c];
            let mean = est.mean();
            let emp_sd = if r > 1 { (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (rf - 1.0)).sqrt() } else { 0.0 };
            let covered = est.iter().zip(se.iter()).filter(|(e, s)| (*e - t).abs() <= z * *s).count();
            MetricRow {
                truth: t,
                mean,
                mae: est.iter().map(|e| (e - t).abs()).sum::<f64>() / rf,
                rmse: (est.iter().map(|e| (e - t).powi(2)).sum::<f64>() / rf).sqrt(),
                emp_sd,
                mean_se: se.mean(),
                coverage: covered as f64 / rf,
            }
        })
        .collect())
}

fn delta_names(k: usize) -> Vec<String> {
    (1..=k).map(|kk| format!("delta_{kk}")).collect()
}

fn param_names(estimator: Estimator, k: usize) -> Vec<String> {
    let mut names = match estimator {
        Estimator::Iv => vec!["beta".to_string(), "alpha".to_string()],
        _ => crate::effects::EffectGrid::labels(k),
    };
    names.extend(delta_names(k));
    names
}

fn truths(cfg: &ScenarioConfig, estimator: Estimator) -> Result<Vec<f64>> {
    let grid = cfg.total_effects()?;
    let mut out = match estimator {
        Estimator::Iv => match cfg.effects {
            EffectSpec::Decay { beta, alpha } => vec![beta, alpha],
            // the decay working model has no true parameters under a saturated truth
            EffectSpec::Saturated { .. } => vec![f64::NAN, f64::NAN],
        },
        _ => grid.values().to_vec(),
    };
    out.extend((1..=cfg.k).map(|k| grid.outcome(k).iter().sum::<f64>()));
    Ok(out)
}

/// Delta-method standard errors of the `Δ_k` (unit vs zero) contrasts.
fn delta_ses(fit: &FitReport, cov: &DMatrix<f64>, k: usize) -> Result<f64> {
    let idx = fit.outcome_params(k)?;
    let p = DVector::from_iterator(idx.len(), idx.iter().map(|&i| fit.coef[i]));
    let grad = fd_jacobian(|x| DVector::from_element(1, fit.expand_outcome(k, x.as_slice()).iter().sum()), &p);
    let block = cov.select_rows(&idx).select_columns(&idx);
    Ok((&grad * block * grad.transpose())[(0, 0)].max(0.0).sqrt())
}

fn rep_fit(fit: &FitReport) -> Result<RepFit> {
    if fit.flags.iter().any(|f| f == "not_converged") {
        return Err(Error::NoConvergence(format!("{} fit did not converge", fit.estimator)));
    }
    let k = match fit.structure {
        Structure::Saturated => fit.index.iter().map(|p| p.0).max().unwrap_or(0),
        Structure::Decay => fit.times.len(),
    };
    let sand = fit.cov_sandwich();
    let naive = fit.cov_naive();
    let mut estimates = fit.coef.clone();
    let mut se_sandwich = fit.se_sandwich();
    let mut se_naive = fit.se_naive();
    for kk in 1..=k {
        estimates.push(contrast_delta(fit, kk, 1.0, 0.0)?);
        se_sandwich.push(delta_ses(fit, &sand, kk)?);
        if let (Some(s), Some(c)) = (se_naive.as_mut(), naive.as_ref()) {
            s.push(delta_ses(fit, c, kk)?);
        }
    }
    if estimates.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteMoment);
    }
    Ok(RepFit { estimates, se_sandwich, se_naive })
}

fn iptw_fit(panel: &PanelData, ws: &WeightSet, exclude: &HashSet<String>, opts: &McOptions) -> Result<FitReport> {
    let extra = if opts.iptw_adjust_flagged {
        let cells = balance_table(panel, ws, exclude)?;
        Some((1..=panel.k()).map(|k| flagged_covariates(&cells, k)).collect::<Vec<_>>())
    } else {
        None
    };
    fit_msm_all(panel, ws, extra.as_deref())
}

/// Run every estimator on one simulated panel.
pub fn run_rep(cfg: &ScenarioConfig, estimators: &[Estimator], rep: usize, seed: u64, opts: &McOptions) -> Result<RepOutcome> {
    let panel = simulate_panel(cfg, seed)?;
    let exclude = cfg.estimation_exclude();
    let mut weight_diag = None;
    let mut partial_f = None;
    let mut fits = Vec::with_capacity(estimators.len());
    for &est in estimators {
        let result: Result<RepFit> = (|| {
            let report = match est {
                Estimator::Iptw | Estimator::IptwGaussian => {
                    let (_, ws) = if est == Estimator::Iptw {
                        fit_weights_balanced(&panel, &exclude)?
                    } else {
                        fit_weights_gaussian(&panel, &exclude)?
                    };
                    if weight_diag.is_none() {
                        weight_diag = Some(weight_diagnostics(&ws));
                    }
                    iptw_fit(&panel, &ws, &exclude, opts)?
                }
                Estimator::GestSequential => fit_gest(&panel, GestFlavor::Sequential, Structure::Saturated, &exclude)?,
                Estimator::GestBasic => fit_gest(&panel, GestFlavor::Basic, Structure::Saturated, &exclude)?,
                Estimator::GestEfficient => fit_gest(&panel, GestFlavor::Efficient, Structure::Saturated, &exclude)?,
                Estimator::Iv => {
                    let partial = if cfg.wrong_partial_out {
                        Some(PartialOut::BaselinePlusTimeVarying)
                    } else if opts.iv_partial_out {
                        Some(PartialOut::BaselineOnly)
                    } else {
                        None
                    };
                    let fit = fit_iv(&panel, opts.iv_sigma, partial, &exclude, seed)?;
                    partial_f = Some(fit.partial_f.clone());
                    fit.to_report()
                }
            };
            rep_fit(&report)
        })();
        if let Err(e) = &result {
            log::debug!("rep {rep} ({est}) failed: {e}");
        }
        fits.push(result.map_err(|e| e.to_string()));
    }
    Ok(RepOutcome { rep, seed, fits, weight_diag, partial_f })
}

/// Worker count: `LONGICAUSAL_THREADS` when set, otherwise all cores.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Replicate a design. Replication `r` uses seed `seed + r`.
pub fn run_design(
    design: &str,
    cfg: &ScenarioConfig,
    estimators: &[Estimator],
    n_reps: usize,
    seed: u64,
    opts: &McOptions,
) -> Result<McSummary> {
    if n_reps < 2 {
        return Err(Error::InvalidConfig("need at least two replications".into()));
    }
    if estimators.is_empty() {
        return Err(Error::InvalidConfig("no estimators requested".into()));
    }
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let reps: Vec<RepOutcome> = pool.install(|| {
        (0..n_reps)
            .into_par_iter()
            .map(|r| run_rep(cfg, estimators, r, seed.wrapping_add(r as u64), opts))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut summary = Vec::new();
    let mut params = Vec::with_capacity(estimators.len());
    for (e, &est) in estimators.iter().enumerate() {
        let names = param_names(est, cfg.k);
        let truth = truths(cfg, est)?;
        let ok: Vec<&RepFit> = reps.iter().filter_map(|r| r.fits[e].as_ref().ok()).collect();
        let failures = n_reps - ok.len();
        if failures as f64 > opts.max_failure_rate * n_reps as f64 {
            return Err(Error::TooManyFailures { failed: failures, total: n_reps });
        }
        if failures > 0 {
            log::warn!("{design}/{est}: {failures} of {n_reps} replications failed and were excluded");
        }
        let q = names.len();
        let est_m = DMatrix::from_fn(ok.len(), q, |i, c| ok[i].estimates[c]);
        let sand_m = DMatrix::from_fn(ok.len(), q, |i, c| ok[i].se_sandwich[c]);
        let sand = summarize(&est_m, &sand_m, &truth, opts.level)?;
        let naive = if est.is_iptw() && ok.iter().all(|f| f.se_naive.is_some()) {
            let m = DMatrix::from_fn(ok.len(), q, |i, c| ok[i].se_naive.as_ref().expect("checked")[c]);
            Some(summarize(&est_m, &m, &truth, opts.level)?)
        } else {
            None
        };
        for (c, name) in names.iter().enumerate() {
            let s = &sand[c];
            summary.push(ParamSummary {
                estimator: est.name().into(),
                parameter: name.clone(),
                truth: s.truth,
                mean: s.mean,
                mae: s.mae,
                rmse: s.rmse,
                emp_sd: s.emp_sd,
                mean_se_sandwich: s.mean_se,
                mean_se_naive: naive.as_ref().map(|n| n[c].mean_se),
                coverage_sandwich: s.coverage,
                coverage_naive: naive.as_ref().map(|n| n[c].coverage),
                n_reps: ok.len(),
                failures,
            });
        }
        params.push(names);
    }
    Ok(McSummary {
        design: design.into(),
        n: cfg.n,
        seed,
        n_reps,
        estimators: estimators.to_vec(),
        params,
        reps,
        summary,
    })
}

/// Median of a sample; `NaN` when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write `summary.csv`, `reps.csv`, `weights.csv` and `partial_f.csv` into `dir`.
pub fn write_outputs(mc: &McSummary, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::cli::write_atomic(&dir.join("summary.csv"), |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "design", "estimator", "parameter", "truth", "estimate", "mae", "rmse", "emp_sd", "sand_se", "reg_se",
            "cov_sand", "cov_reg", "n_reps", "failures", "n", "seed",
        ])?;
        for r in &mc.summary {
            out.write_record([
                mc.design.clone(),
                r.estimator.clone(),
                r.parameter.clone(),
                r.truth.to_string(),
                r.mean.to_string(),
                r.mae.to_string(),
                r.rmse.to_string(),
                r.emp_sd.to_string(),
                r.mean_se_sandwich.to_string(),
                fmt_opt(r.mean_se_naive),
                r.coverage_sandwich.to_string(),
                fmt_opt(r.coverage_naive),
                r.n_reps.to_string(),
                r.failures.to_string(),
                mc.n.to_string(),
                mc.seed.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    })?;
    crate::cli::write_atomic(&dir.join("reps.csv"), |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["rep", "seed", "estimator", "parameter", "estimate", "se_sandwich", "se_naive", "error"])?;
        for rep in &mc.reps {
            for (e, fit) in rep.fits.iter().enumerate() {
                let est = mc.estimators[e].name();
                match fit {
                    Ok(f) => {
                        for (p, name) in mc.params[e].iter().enumerate() {
                            out.write_record([
                                rep.rep.to_string(),
                                rep.seed.to_string(),
                                est.to_string(),
                                name.clone(),
                                f.estimates[p].to_string(),
                                f.se_sandwich[p].to_string(),
                                fmt_opt(f.se_naive.as_ref().map(|s| s[p])),
                                String::new(),
                            ])?;
                        }
                    }
                    Err(msg) => out.write_record([
                        rep.rep.to_string(),
                        rep.seed.to_string(),
                        est.to_string(),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                        msg.clone(),
                    ])?,
                }
            }
        }
        out.flush()?;
        Ok(())
    })?;
    if mc.reps.iter().any(|r| r.weight_diag.is_some()) {
        crate::cli::write_atomic(&dir.join("weights.csv"), |w| {
            let mut out = csv::Writer::from_writer(w);
            out.write_record(["rep", "time", "ess", "share_top1", "q999", "min", "max", "mean"])?;
            for rep in &mc.reps {
                for d in rep.weight_diag.iter().flatten() {
                    out.write_record([
                        rep.rep.to_string(),
                        d.time.to_string(),
                        d.ess.to_string(),
                        d.share_top1.to_string(),
                        d.q999.to_string(),
                        d.min.to_string(),
                        d.max.to_string(),
                        d.mean.to_string(),
                    ])?;
                }
            }
            out.flush()?;
            Ok(())
        })?;
    }
    if mc.reps.iter().any(|r| r.partial_f.is_some()) {
        crate::cli::write_atomic(&dir.join("partial_f.csv"), |w| {
            let mut out = csv::Writer::from_writer(w);
            out.write_record(["rep", "time", "partial_f"])?;
            for rep in &mc.reps {
                for (t, f) in rep.partial_f.iter().flatten().enumerate() {
                    out.write_record([rep.rep.to_string(), (t + 1).to_string(), f.to_string()])?;
                }
            }
            out.flush()?;
            Ok(())
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::scenario_preset;

    #[test]
    fn hand_metrics() {
        let est = DMatrix::from_column_slice(2, 1, &[1.0, 3.0]);
        let se = DMatrix::from_column_slice(2, 1, &[0.1, 0.1]);
        let m = &summarize(&est, &se, &[2.0], 0.95).unwrap()[0];
        assert_eq!(m.mae, 1.0);
        assert_eq!(m.rmse, 1.0);
        assert!((m.emp_sd - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(m.coverage, 0.0);
    }

    #[test]
    fn perfect_estimator_covers() {
        let est = DMatrix::from_element(5, 2, 0.7);
        let se = DMatrix::from_element(5, 2, 0.01);
        for m in summarize(&est, &se, &[0.7, 0.7], 0.95).unwrap() {
            assert_eq!(m.coverage, 1.0);
            assert_eq!(m.mae, 0.0);
        }
    }

    #[test]
    fn zero_se_misses() {
        let est = DMatrix::from_element(3, 1, 1.0);
        let se = DMatrix::zeros(3, 1);
        assert_eq!(summarize(&est, &se, &[0.9], 0.95).unwrap()[0].coverage, 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let est = DMatrix::zeros(3, 2);
        let se = DMatrix::zeros(3, 1);
        assert!(matches!(summarize(&est, &se, &[0.0, 0.0], 0.95), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn z_matches_constant() {
        assert!((z_for_level(0.95) - crate::numkit::Z_975).abs() < 1e-9);
    }

    #[test]
    fn smoke_run_is_deterministic() {
        let mut cfg = scenario_preset("design1b").unwrap();
        cfg.n = 400;
        let ests = [Estimator::GestEfficient, Estimator::Iptw];
        let a = run_design("design1b", &cfg, &ests, 2, 10, &McOptions::default()).unwrap();
        let b = run_design("design1b", &cfg, &ests, 2, 10, &McOptions::default()).unwrap();
        assert_eq!(a.params[0].len(), 9);
        assert_eq!(a.summary.len(), 18);
        for (x, y) in a.summary.iter().zip(&b.summary) {
            assert_eq!(x.mean.to_bits(), y.mean.to_bits());
        }
    }
}
