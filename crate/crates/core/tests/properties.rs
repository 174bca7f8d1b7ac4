use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use longicausal::effects::{EffectGrid, FitReport, Structure};
use longicausal::estimand::{bootstrap_ci, contrast_delta};
use longicausal::gest::{fit_gmm_basic, fit_gmm_efficient, fit_sequential_grid, GestFlavor, MomentSystem};
use longicausal::iv::{fit_iv_decay, SigmaSpec};
use longicausal::mc::{run_design, Estimator, McOptions};
use longicausal::numkit::{mvn_sample, ols_fit, wls_fit};
use longicausal::simgen::{derive_direct_effects, scenario_preset, simulate_panel, EffectSpec, ScenarioConfig};
use longicausal::weights::{diagnostics_for, fit_weights_gaussian, weight_diagnostics};

fn random_config() -> impl Strategy<Value = (ScenarioConfig, u64)> {
    (
        1usize..5,
        150usize..400,
        (-0.5f64..0.5, -0.3f64..0.3, 0.0f64..1.0, -0.5f64..0.8),
        (-0.8f64..0.8, -0.8f64..0.8),
        0.3f64..1.5,
        any::<u64>(),
    )
        .prop_map(|(k, n, (eta_a, eta_y, tau, beta_y), (beta, alpha), gamma, seed)| {
            let mut cfg = scenario_preset("design1a").unwrap();
            cfg.k = k;
            cfg.n = n;
            cfg.eta_a = eta_a;
            cfg.eta_y = eta_y;
            cfg.tau = tau;
            cfg.beta_y = beta_y;
            cfg.gamma_g = gamma;
            cfg.effects = EffectSpec::Decay { beta, alpha };
            (cfg, seed)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gest_flavors_agree_on_random_panels((cfg, seed) in random_config()) {
        let panel = simulate_panel(&cfg, seed).unwrap();
        let ex = cfg.estimation_exclude();
        let seq = fit_sequential_grid(&panel, &ex).unwrap();
        let basic = fit_gmm_basic(&panel, Structure::Saturated, &ex).unwrap();
        let eff = fit_gmm_efficient(&panel, Structure::Saturated, &ex).unwrap();
        for i in 0..seq.values().len() {
            prop_assert!((seq.values()[i] - basic.coef[i]).abs() <= 1e-8);
            prop_assert!((basic.coef[i] - eff.coef[i]).abs() <= 1e-8);
        }
    }

    #[test]
    fn saturated_moments_vanish((cfg, seed) in random_config(), efficient in any::<bool>()) {
        let panel = simulate_panel(&cfg, seed).unwrap();
        let ex = cfg.estimation_exclude();
        let flavor = if efficient { GestFlavor::Efficient } else { GestFlavor::Basic };
        let sys = MomentSystem::build(&panel, flavor, &ex).unwrap();
        let fit = fit_gmm_basic(&panel, Structure::Saturated, &ex).unwrap();
        let (m, b) = sys.linear_form();
        let resid = b - m * DVector::from_vec(fit.coef.clone());
        prop_assert!(resid.amax() <= 1e-8, "{}", resid.amax());
    }

    #[test]
    fn wls_residuals_orthogonal(
        rows in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -10.0f64..10.0, 0.01f64..20.0), 8..60)
    ) {
        let n = rows.len();
        let x = DMatrix::from_fn(n, 3, |i, c| match c { 0 => 1.0, 1 => rows[i].0, _ => rows[i].1 });
        let y = DVector::from_fn(n, |i, _| rows[i].2);
        let w = DVector::from_fn(n, |i, _| rows[i].3);
        if let Ok(fit) = wls_fit(&x, &y, &w) {
            let ortho = x.transpose() * w.component_mul(&fit.residuals);
            prop_assert!(ortho.amax() <= 1e-8 * (1.0 + y.amax() * w.amax() * x.amax()));
        }
    }

    #[test]
    fn contrast_is_linear_in_exposure_gap(
        grid in proptest::collection::vec(-3.0f64..3.0, 6),
        hi in -100.0f64..100.0,
        lo in -100.0f64..100.0,
        k in 1usize..4,
    ) {
        let fit = report(grid, 0.0);
        let d1 = contrast_delta(&fit, k, hi, lo).unwrap();
        let d2 = contrast_delta(&fit, k, 2.0 * hi, 2.0 * lo).unwrap();
        prop_assert_eq!(d2, 2.0 * d1);
        prop_assert_eq!(contrast_delta(&fit, k, hi, hi).unwrap(), 0.0);
    }

    #[test]
    fn mvn_sample_is_reproducible(seed in any::<u64>(), rho in -0.9f64..0.9) {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 2.0]);
        let mean = DVector::from_vec(vec![0.5, -1.0]);
        let a = mvn_sample(&mean, &cov, 50, seed).unwrap();
        let b = mvn_sample(&mean, &cov, 50, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn weight_diagnostics_bounds(w in proptest::collection::vec(0.001f64..50.0, 1..300), scale in 0.01f64..100.0) {
        let d = diagnostics_for(&w, 1);
        let n = w.len() as f64;
        prop_assert!(d.ess >= 1.0 - 1e-9 && d.ess <= n + 1e-9);
        prop_assert!(d.share_top1 > 0.0 && d.share_top1 <= 1.0 + 1e-12);
        prop_assert!(d.min <= d.q999 && d.q999 <= d.max);
        let scaled: Vec<f64> = w.iter().map(|v| v * scale).collect();
        let ds = diagnostics_for(&scaled, 1);
        prop_assert!((ds.ess - d.ess).abs() <= 1e-9 * d.ess);
        prop_assert!((ds.share_top1 - d.share_top1).abs() <= 1e-12);
    }

    #[test]
    fn iv_invariant_to_affine_instrument(c in prop_oneof![-5.0f64..-0.2, 0.2f64..5.0], d in -10.0f64..10.0, seed in 0u64..1000) {
        let mut cfg = scenario_preset("design1b").unwrap();
        cfg.n = 600;
        let panel = simulate_panel(&cfg, seed).unwrap();
        let base = fit_iv_decay(&panel, SigmaSpec::Identity, 1).unwrap();
        let mut moved = panel.clone();
        moved.g = moved.g.map(|g| g.map(|v| c * v + d));
        let fit = fit_iv_decay(&moved, SigmaSpec::Identity, 1).unwrap();
        prop_assume!(base.converged && fit.converged);
        prop_assert!((fit.beta - base.beta).abs() <= 1e-8 && (fit.alpha - base.alpha).abs() <= 1e-8,
            "({}, {}) vs ({}, {})", fit.beta, fit.alpha, base.beta, base.alpha);
    }
}

fn report(coef: Vec<f64>, cov_scale: f64) -> FitReport {
    let q = coef.len();
    FitReport {
        estimator: "test".into(),
        structure: Structure::Saturated,
        names: EffectGrid::labels(3),
        coef,
        index: EffectGrid::pairs(3),
        cov_naive: None,
        cov_sandwich: (0..q).map(|r| (0..q).map(|c| if r == c { cov_scale } else { 0.0 }).collect()).collect(),
        n: 100,
        times: vec![1.0, 2.0, 3.0],
        flags: Vec::new(),
    }
}

#[test]
fn bootstrap_width_shrinks_with_covariance() {
    let grid = vec![-1.0, -0.5, -0.9, -0.2, -0.4, -0.8];
    let mut last = f64::INFINITY;
    for e in 0..8 {
        let eps = 10f64.powi(-2 * e);
        let r = bootstrap_ci(&report(grid.clone(), eps), 3, 1.0, 0.0, 2000, 0.95, 9).unwrap();
        let width = r.ci_hi - r.ci_lo;
        assert!(width < last, "width {width} at eps {eps}");
        last = width;
    }
    assert!(last < 1e-5, "{last}");
}

#[test]
fn noise_free_outcome_regression_recovers_direct_effects() {
    for (design, seed) in [("design1a", 1), ("design1b", 2)] {
        let mut cfg = scenario_preset(design).unwrap();
        cfg.n = 400;
        // exposures keep their noise so the regressors stay full rank
        cfg.sd_eps = 0.0;
        let panel = simulate_panel(&cfg, seed).unwrap();
        let total = cfg.total_effects().unwrap();
        let pi = derive_direct_effects(&total, cfg.beta_y, cfg.beta_v, cfg.tau).unwrap().pi;
        let v = panel.v.as_ref().unwrap();
        for k in 1..=cfg.k {
            let mut cols: Vec<DVector<f64>> = vec![DVector::from_element(cfg.n, 1.0)];
            cols.extend((1..=k).map(|j| panel.a_col(j)));
            cols.extend(panel.l0.column_iter().map(|c| c.into_owned()));
            cols.push(v.column(k - 1).into_owned());
            if k > 1 {
                cols.push(panel.y_col(k - 1));
            }
            let fit = ols_fit(&DMatrix::from_columns(&cols), &panel.y_col(k)).unwrap();
            for j in 1..=k {
                assert!((fit.coef[j] - pi.get(k, j)).abs() < 1e-8, "{design} pi_{k}({j})");
            }
            let coef_v = fit.coef[k + 1 + panel.l0.ncols()];
            assert!((coef_v - cfg.beta_v).abs() < 1e-8);
            // totals reassemble from the direct effects
            for j in 1..=k {
                let lag = if k > j { cfg.beta_y * total.get(k - 1, j) } else { 0.0 };
                let med = if k == j + 1 { cfg.beta_v * cfg.tau } else { 0.0 };
                assert!((pi.get(k, j) + lag + med - total.get(k, j)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn stabilized_weights_average_one() {
    let cfg = scenario_preset("design1b").unwrap();
    let panel = simulate_panel(&cfg, 77).unwrap();
    let (_, ws) = fit_weights_gaussian(&panel, &cfg.estimation_exclude()).unwrap();
    for d in weight_diagnostics(&ws) {
        assert!((d.mean - 1.0).abs() <= 0.05, "time {} mean {}", d.time, d.mean);
    }
}

#[test]
fn feedback_lowers_effective_sample_size() {
    let ess3 = |design: &str| {
        let cfg = scenario_preset(design).unwrap();
        let mut v: Vec<f64> = (0..5)
            .map(|s| {
                let panel = simulate_panel(&cfg, 500 + s).unwrap();
                let (_, ws) = fit_weights_gaussian(&panel, &HashSet::new()).unwrap();
                weight_diagnostics(&ws)[2].ess
            })
            .collect();
        v.sort_by(f64::total_cmp);
        v[2]
    };
    assert!(ess3("design1a") < ess3("design1b"));
}

#[test]
fn mc_seed_bases_agree_within_mc_error() {
    let mut cfg = scenario_preset("design1b").unwrap();
    cfg.n = 1000;
    let est = [Estimator::GestEfficient];
    let opts = McOptions::default();
    let a = run_design("design1b", &cfg, &est, 40, 1, &opts).unwrap();
    let b = run_design("design1b", &cfg, &est, 40, 100_000, &opts).unwrap();
    for (ra, rb) in a.summary.iter().zip(&b.summary) {
        let se = (ra.emp_sd.powi(2) / 40.0 + rb.emp_sd.powi(2) / 40.0).sqrt();
        assert!((ra.mean - rb.mean).abs() <= 3.0 * se, "{}: {} vs {}", ra.parameter, ra.mean, rb.mean);
    }
}

#[test]
fn efficient_standard_errors_not_larger_than_basic() {
    let cfg = scenario_preset("design1b").unwrap();
    let mc = run_design("design1b", &cfg, &[Estimator::GestBasic, Estimator::GestEfficient], 20, 31, &McOptions::default()).unwrap();
    for p in EffectGrid::labels(3) {
        let basic = mc.row(Estimator::GestBasic, &p).unwrap().mean_se_sandwich;
        let eff = mc.row(Estimator::GestEfficient, &p).unwrap().mean_se_sandwich;
        assert!(eff <= basic, "{p}: efficient {eff} vs basic {basic}");
    }
}
