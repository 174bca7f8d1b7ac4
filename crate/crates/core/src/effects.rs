//! Effect grids and fitted-model reports shared by all estimators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::decay_power;

/// Lower-triangular grid of effects `β_k(j)`, `1 ≤ j ≤ k ≤ K`, stored
/// row-major: `β_1(1), β_2(1), β_2(2), β_3(1), …`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectGrid {
    k: usize,
    values: Vec<f64>,
}

impl EffectGrid {
    pub fn len_for(k: usize) -> usize {
        k * (k + 1) / 2
    }

    /// Position of `β_k(j)` in the flat layout (1-based `k`, `j`).
    pub fn index(k: usize, j: usize) -> usize {
        debug_assert!(j >= 1 && j <= k);
        k * (k - 1) / 2 + (j - 1)
    }

    pub fn new(k: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != Self::len_for(k) {
            return Err(Error::IncompleteGrid(format!(
                "K={k} needs {} entries, got {}",
                Self::len_for(k),
                values.len()
            )));
        }
        Ok(Self { k, values })
    }

    pub fn zeros(k: usize) -> Self {
        Self { k, values: vec![0.0; Self::len_for(k)] }
    }

    /// `β_k(j) = β·α^(t_k − t_j)`.
    pub fn from_decay(beta: f64, alpha: f64, times: &[f64]) -> Self {
        let k = times.len();
        let mut values = Vec::with_capacity(Self::len_for(k));
        for kk in 1..=k {
            for j in 1..=kk {
                values.push(beta * decay_power(alpha, times[kk - 1] - times[j - 1]));
            }
        }
        Self { k, values }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.values[Self::index(k, j)]
    }

    pub fn set(&mut self, k: usize, j: usize, v: f64) {
        self.values[Self::index(k, j)] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Coefficients of outcome `k`: `β_k(1..=k)`.
    pub fn outcome(&self, k: usize) -> &[f64] {
        let start = Self::index(k, 1);
        &self.values[start..start + k]
    }

    pub fn labels(k: usize) -> Vec<String> {
        let mut out = Vec::with_capacity(Self::len_for(k));
        for kk in 1..=k {
            for j in 1..=kk {
                out.push(format!("beta_{kk}({j})"));
            }
        }
        out
    }

    pub fn pairs(k: usize) -> Vec<(usize, usize)> {
        (1..=k).flat_map(|kk| (1..=kk).map(move |j| (kk, j))).collect()
    }
}

/// How the effects are parameterised in a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Saturated,
    Decay,
}

impl std::str::FromStr for Structure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saturated" => Ok(Structure::Saturated),
            "decay" => Ok(Structure::Decay),
            other => Err(Error::InvalidConfig(format!("unknown structure `{other}`"))),
        }
    }
}

/// Point estimates and covariances from any estimator.
///
/// Saturated fits carry one coefficient per `(k, j)` in `index`; decay fits
/// carry `[beta, alpha]` and expand through `times`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub estimator: String,
    pub structure: Structure,
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    /// `(k, j)` for each saturated coefficient; empty for decay fits.
    pub index: Vec<(usize, usize)>,
    pub cov_naive: Option<Vec<Vec<f64>>>,
    pub cov_sandwich: Vec<Vec<f64>>,
    pub n: usize,
    /// Common measurement times, used to expand decay coefficients.
    pub times: Vec<f64>,
    #[serde(default)]
    pub flags: Vec<String>,
}

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, m, |r, c| rows[r][c])
}

impl FitReport {
    pub fn cov_sandwich(&self) -> DMatrix<f64> {
        from_rows(&self.cov_sandwich)
    }

    pub fn cov_naive(&self) -> Option<DMatrix<f64>> {
        self.cov_naive.as_deref().map(from_rows)
    }

    pub fn se_sandwich(&self) -> Vec<f64> {
        (0..self.coef.len()).map(|i| self.cov_sandwich[i][i].max(0.0).sqrt()).collect()
    }

    pub fn se_naive(&self) -> Option<Vec<f64>> {
        self.cov_naive
            .as_ref()
            .map(|c| (0..self.coef.len()).map(|i| c[i][i].max(0.0).sqrt()).collect())
    }

    /// Coefficient positions that determine outcome `k`.
    pub fn outcome_params(&self, k: usize) -> Result<Vec<usize>> {
        match self.structure {
            Structure::Saturated => {
                let mut idx: Vec<(usize, usize)> = self
                    .index
                    .iter()
                    .enumerate()
                    .filter(|(_, (kk, _))| *kk == k)
                    .map(|(i, (_, j))| (*j, i))
                    .collect();
                idx.sort();
                if idx.len() != k {
                    return Err(Error::MissingOutcomeBlock(k));
                }
                Ok(idx.into_iter().map(|(_, i)| i).collect())
            }
            Structure::Decay => {
                if k == 0 || k > self.times.len() {
                    return Err(Error::MissingOutcomeBlock(k));
                }
                Ok(vec![0, 1])
            }
        }
    }

    /// `β_k(1..=k)` implied by a parameter vector restricted to
    /// [`outcome_params`](Self::outcome_params).
    pub fn expand_outcome(&self, k: usize, params: &[f64]) -> Vec<f64> {
        match self.structure {
            Structure::Saturated => params.to_vec(),
            Structure::Decay => (1..=k)
                .map(|j| params[0] * decay_power(params[1], self.times[k - 1] - self.times[j - 1]))
                .collect(),
        }
    }

    /// Full effect grid implied by the fit.
    pub fn grid(&self) -> Result<EffectGrid> {
        match self.structure {
            Structure::Saturated => {
                let k = self.index.iter().map(|(k, _)| *k).max().unwrap_or(0);
                let mut grid = EffectGrid::zeros(k);
                for (c, (kk, j)) in self.coef.iter().zip(&self.index) {
                    grid.set(*kk, *j, *c);
                }
                if self.index.len() != EffectGrid::len_for(k) {
                    return Err(Error::IncompleteGrid(format!("fit covers {} of {} effects", self.index.len(), EffectGrid::len_for(k))));
                }
                Ok(grid)
            }
            Structure::Decay => Ok(EffectGrid::from_decay(self.coef[0], self.coef[1], &self.times)),
        }
    }

    pub fn coef_vector(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.coef)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        assert_eq!(EffectGrid::index(1, 1), 0);
        assert_eq!(EffectGrid::index(2, 1), 1);
        assert_eq!(EffectGrid::index(3, 3), 5);
        assert_eq!(EffectGrid::labels(2), vec!["beta_1(1)", "beta_2(1)", "beta_2(2)"]);
    }

    #[test]
    fn decay_grid() {
        let g = EffectGrid::from_decay(-1.1, 0.95, &[1.0, 2.0, 3.0]);
        assert!((g.get(3, 1) - (-0.99275)).abs() < 1e-12);
        assert!((g.get(2, 1) - (-1.045)).abs() < 1e-12);
        assert_eq!(g.outcome(3).len(), 3);
    }

    #[test]
    fn incomplete_grid() {
        assert!(matches!(EffectGrid::new(3, vec![0.0; 5]), Err(Error::IncompleteGrid(_))));
    }
}
