//! Synthetic longitudinal panels with a known effect grid.
//!
//! Exposure and outcome follow
//!
//! ```text
//! A_k = γ_G·G + η_A·A_{k-1} + η_Y·Y_{k-1} + η_1·F1 + η_2·F2 + η_V·V_k + ξ_k
//! Y_k = Σ_j π_k(j)·A_j + β_Y·Y_{k-1} + β_F1·F1 + β_F2·F2 + β_V·V_k + ε_k
//! V_k = BV_k + τ·A_{k-1},   BV_k = ρ·BV_{k-1} + N(0, σ_BV²)
//! ```
//!
//! with the direct effects `π` chosen so that the total effects equal the
//! configured grid.

use std::collections::{BTreeMap, HashSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::effects::EffectGrid;
use crate::error::{Error, Result};
use crate::numkit::rng::{binomial2, normal, rng_new};
use crate::panel::PanelData;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum EffectSpec {
    Decay { beta: f64, alpha: f64 },
    /// Row-major lower triangle `β_1(1), β_2(1), β_2(2), …`.
    Saturated { grid: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n: usize,
    pub k: usize,
    /// Measurement times; `t_k = k` when absent.
    #[serde(default)]
    pub times: Option<Vec<f64>>,
    pub gamma_g: f64,
    pub eta_a: f64,
    pub eta_y: f64,
    pub eta_1: f64,
    pub eta_2: f64,
    pub eta_v: f64,
    pub beta_y: f64,
    pub beta_f1: f64,
    pub beta_f2: f64,
    pub beta_v: f64,
    pub tau: f64,
    pub ar_rho: f64,
    pub ar_sd: f64,
    pub p_g: f64,
    pub f1_mean: f64,
    pub f2_mean: f64,
    pub effects: EffectSpec,
    pub sd_xi: f64,
    pub sd_eps: f64,
    #[serde(default)]
    pub omit_f1_from_estimation: bool,
    #[serde(default)]
    pub weak_iv: bool,
    #[serde(default)]
    pub wrong_partial_out: bool,
}

pub const PRESETS: [&str; 6] = [
    "design1a",
    "design1b",
    "design2",
    "design2_weak_iv",
    "design2_wrong_adjust",
    "design3",
];

/// Named simulation designs.
pub fn scenario_preset(name: &str) -> Result<ScenarioConfig> {
    let base = ScenarioConfig {
        n: 5000,
        k: 3,
        times: None,
        gamma_g: 0.5,
        eta_a: 0.2,
        eta_y: 0.1,
        eta_1: 0.2,
        eta_2: 0.3,
        eta_v: 0.5,
        beta_y: 0.5,
        beta_f1: 0.4,
        beta_f2: -0.1,
        beta_v: -0.6,
        tau: 0.8,
        ar_rho: 0.98,
        ar_sd: 0.2,
        p_g: 0.2,
        f1_mean: 0.2,
        f2_mean: -0.1,
        effects: EffectSpec::Decay { beta: -1.1, alpha: 0.95 },
        sd_xi: 1.0,
        sd_eps: 1.0,
        omit_f1_from_estimation: false,
        weak_iv: false,
        wrong_partial_out: false,
    };
    let cfg = match name {
        "design1a" => base,
        "design1b" => ScenarioConfig { tau: 0.0, ..base },
        "design2" => ScenarioConfig { omit_f1_from_estimation: true, ..base },
        "design2_weak_iv" => ScenarioConfig {
            omit_f1_from_estimation: true,
            gamma_g: 0.05,
            weak_iv: true,
            ..base
        },
        "design2_wrong_adjust" => ScenarioConfig {
            omit_f1_from_estimation: true,
            wrong_partial_out: true,
            ..base
        },
        "design3" => ScenarioConfig {
            tau: 0.0,
            effects: EffectSpec::Saturated { grid: vec![-1.1, -0.6, -1.05, -0.2, -0.55, -0.1] },
            ..base
        },
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    Ok(cfg)
}

impl ScenarioConfig {
    pub fn times(&self) -> Vec<f64> {
        self.times.clone().unwrap_or_else(|| (1..=self.k).map(|s| s as f64).collect())
    }

    /// Total-effect grid targeted by every estimator.
    pub fn total_effects(&self) -> Result<EffectGrid> {
        match &self.effects {
            EffectSpec::Decay { beta, alpha } => Ok(EffectGrid::from_decay(*beta, *alpha, &self.times())),
            EffectSpec::Saturated { grid } => EffectGrid::new(self.k, grid.clone()),
        }
    }

    /// Baseline covariates withheld from estimation.
    pub fn estimation_exclude(&self) -> HashSet<String> {
        if self.omit_f1_from_estimation {
            ["F1".to_string()].into()
        } else {
            HashSet::new()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.n < self.k + 4 {
            return bad("n too small for the requested number of time points");
        }
        if [self.ar_sd, self.sd_xi, self.sd_eps].iter().any(|v| !(*v >= 0.0)) {
            return bad("standard deviations must be non-negative");
        }
        if !(self.tau >= 0.0) {
            return bad("tau must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.p_g) {
            return bad("p_g must lie in [0, 1]");
        }
        let times = self.times();
        if times.len() != self.k || times.windows(2).any(|w| w[1] <= w[0]) {
            return bad("times must be strictly increasing with one entry per time point");
        }
        self.total_effects().map(|_| ())
    }

    /// Set one field from a `key=value` override, parsing the value as JSON
    /// and falling back to a bare string.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let mut obj = serde_json::to_value(&*self)?;
        let map = obj.as_object_mut().expect("config serialises to an object");
        if !map.contains_key(key) {
            return Err(Error::InvalidConfig(format!("unknown scenario key `{key}`")));
        }
        let parsed = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        map.insert(key.to_string(), parsed);
        *self = serde_json::from_value(obj).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

/// Direct effects `π` implied by total effects under the DGP.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectEffects {
    pub pi: EffectGrid,
}

/// Peel indirect paths off the total effects.
///
/// Holding later exposures fixed, `A_j` reaches `Y_k` directly, through the
/// outcome lag chain, and (for `k = j + 1`) through `V_{j+1}`. Hence
/// `π_k(j) = β_k(j) − β_Y·β_{k−1}(j) − β_V·τ·[k = j+1]` for `j < k`.
pub fn derive_direct_effects(total: &EffectGrid, beta_y: f64, beta_v: f64, tau: f64) -> Result<DirectEffects> {
    let k = total.k();
    if k == 0 || total.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::IncompleteGrid("effect grid must be complete and finite".into()));
    }
    let mut pi = EffectGrid::zeros(k);
    for kk in 1..=k {
        for j in 1..=kk {
            let direct = if j == kk {
                total.get(kk, j)
            } else {
                let via_v = if kk == j + 1 { beta_v * tau } else { 0.0 };
                total.get(kk, j) - beta_y * total.get(kk - 1, j) - via_v
            };
            pi.set(kk, j, direct);
        }
    }
    Ok(DirectEffects { pi })
}

/// Draw one panel. The same `(cfg, seed)` always yields the same panel.
pub fn simulate_panel(cfg: &ScenarioConfig, seed: u64) -> Result<PanelData> {
    cfg.validate()?;
    let (n, k) = (cfg.n, cfg.k);
    let total = cfg.total_effects()?;
    let pi = derive_direct_effects(&total, cfg.beta_y, cfg.beta_v, cfg.tau)?.pi;
    let times = cfg.times();
    let mut rng = rng_new(seed);

    let mut a = DMatrix::zeros(n, k);
    let mut y = DMatrix::zeros(n, k);
    let mut v = DMatrix::zeros(n, k);
    let mut bv = DMatrix::zeros(n, k);
    let mut g = DVector::zeros(n);
    let mut f1 = DVector::zeros(n);
    let mut f2 = DVector::zeros(n);

    for i in 0..n {
        g[i] = binomial2(&mut rng, cfg.p_g);
        f1[i] = normal(&mut rng, cfg.f1_mean, 1.0);
        f2[i] = normal(&mut rng, cfg.f2_mean, 1.0);
        let (mut a_prev, mut y_prev, mut bv_prev) = (0.0, 0.0, 0.0);
        for s in 0..k {
            let bv_s = cfg.ar_rho * bv_prev + normal(&mut rng, 0.0, cfg.ar_sd);
            let v_s = bv_s + cfg.tau * a_prev;
            let xi = normal(&mut rng, 0.0, cfg.sd_xi);
            let eps = normal(&mut rng, 0.0, cfg.sd_eps);
            let a_s = cfg.gamma_g * g[i]
                + cfg.eta_a * a_prev
                + cfg.eta_y * y_prev
                + cfg.eta_1 * f1[i]
                + cfg.eta_2 * f2[i]
                + cfg.eta_v * v_s
                + xi;
            a[(i, s)] = a_s;
            let direct: f64 = (0..=s).map(|j| pi.get(s + 1, j + 1) * a[(i, j)]).sum();
            let y_s = direct + cfg.beta_y * y_prev + cfg.beta_f1 * f1[i] + cfg.beta_f2 * f2[i] + cfg.beta_v * v_s + eps;
            y[(i, s)] = y_s;
            v[(i, s)] = v_s;
            bv[(i, s)] = bv_s;
            a_prev = a_s;
            y_prev = y_s;
            bv_prev = bv_s;
        }
    }

    let mut latent = BTreeMap::new();
    latent.insert("F1".to_string(), DMatrix::from_column_slice(n, 1, f1.as_slice()));
    latent.insert("F2".to_string(), DMatrix::from_column_slice(n, 1, f2.as_slice()));
    latent.insert("BV".to_string(), bv);

    let panel = PanelData {
        ids: (1..=n).map(|i| i.to_string()).collect(),
        a,
        y,
        t: DMatrix::from_fn(n, k, |_, s| times[s]),
        l0: DMatrix::from_columns(&[f1, f2]),
        l0_names: vec!["F1".into(), "F2".into()],
        v: Some(v),
        g: Some(g),
        latent,
    };
    Ok(panel)
}
