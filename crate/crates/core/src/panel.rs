//! Wide-format longitudinal panels.
//!
//! One row per individual with per-visit columns (`A1..AK`, `Y1..YK`,
//! `t1..tK`), baseline covariates, optional time-varying covariates and an
//! optional instrument.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    pub ids: Vec<String>,
    /// Exposure, n×K.
    pub a: DMatrix<f64>,
    /// Outcome, n×K.
    pub y: DMatrix<f64>,
    /// Measurement times, n×K, strictly increasing along each row.
    pub t: DMatrix<f64>,
    /// Baseline covariates, n×p0.
    pub l0: DMatrix<f64>,
    pub l0_names: Vec<String>,
    /// Time-varying covariate, n×K.
    pub v: Option<DMatrix<f64>>,
    /// Instrument.
    pub g: Option<DVector<f64>>,
    /// Simulation-only quantities, never read by estimators.
    pub latent: BTreeMap<String, DMatrix<f64>>,
}

impl PanelData {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn k(&self) -> usize {
        self.a.ncols()
    }

    /// Exposure column for 1-based time `s`.
    pub fn a_col(&self, s: usize) -> DVector<f64> {
        self.a.column(s - 1).into_owned()
    }

    pub fn y_col(&self, s: usize) -> DVector<f64> {
        self.y.column(s - 1).into_owned()
    }

    /// Time grid shared by every individual, if there is one.
    pub fn common_times(&self) -> Option<Vec<f64>> {
        let first: Vec<f64> = self.t.row(0).iter().copied().collect();
        let shared = self
            .t
            .row_iter()
            .all(|row| row.iter().zip(&first).all(|(a, b)| (a - b).abs() < 1e-12));
        shared.then_some(first)
    }

    /// Check every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let (n, k) = self.a.shape();
        if k == 0 {
            return Err(Error::InvalidConfig("panel needs at least one time point".into()));
        }
        if self.y.shape() != (n, k) || self.t.shape() != (n, k) {
            return Err(Error::DimensionMismatch("A, Y and t must share one shape".into()));
        }
        if self.ids.len() != n || self.l0.nrows() != n || self.l0.ncols() != self.l0_names.len() {
            return Err(Error::DimensionMismatch("row count or covariate names disagree".into()));
        }
        if let Some(v) = &self.v {
            if v.shape() != (n, k) {
                return Err(Error::DimensionMismatch("V must be n×K".into()));
            }
        }
        if let Some(g) = &self.g {
            if g.len() != n {
                return Err(Error::DimensionMismatch("G must have n entries".into()));
            }
        }
        let need = k + self.l0.ncols() + 2;
        if n < need {
            return Err(Error::TooFewRows { have: n, need });
        }
        let mut blocks: Vec<(String, &DMatrix<f64>)> = vec![
            ("A".into(), &self.a),
            ("Y".into(), &self.y),
            ("t".into(), &self.t),
            ("L0".into(), &self.l0),
        ];
        if let Some(v) = &self.v {
            blocks.push(("V".into(), v));
        }
        for (name, m) in blocks {
            for ((row, col), v) in m.iter().enumerate().map(|(idx, v)| ((idx % n, idx / n), v)) {
                if !v.is_finite() {
                    let col = if name == "L0" { self.l0_names[col].clone() } else { format!("{name}{}", col + 1) };
                    return Err(Error::NonFiniteValue { row, col });
                }
            }
        }
        if let Some(g) = &self.g {
            if let Some(row) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue { row, col: "G".into() });
            }
        }
        for (i, row) in self.t.row_iter().enumerate() {
            if row.iter().zip(row.iter().skip(1)).any(|(a, b)| b <= a) {
                return Err(Error::NonIncreasingTimes(self.ids[i].clone()));
            }
        }
        Ok(())
    }

    /// Copy with the given rows only, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> PanelData {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)]);
        PanelData {
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            a: pick(&self.a),
            y: pick(&self.y),
            t: pick(&self.t),
            l0: pick(&self.l0),
            l0_names: self.l0_names.clone(),
            v: self.v.as_ref().map(pick),
            g: self.g.as_ref().map(|g| DVector::from_iterator(rows.len(), rows.iter().map(|&r| g[r]))),
            latent: self.latent.iter().map(|(k, m)| (k.clone(), pick(m))).collect(),
        }
    }
}

/// A named design matrix.
#[derive(Debug, Clone)]
pub struct Design {
    pub names: Vec<String>,
    pub x: DMatrix<f64>,
}

impl Design {
    pub fn column(&self, name: &str) -> Option<DVector<f64>> {
        self.names.iter().position(|n| n == name).map(|i| self.x.column(i).into_owned())
    }

    /// Drop the intercept column, if present.
    pub fn without_intercept(&self) -> Design {
        let keep: Vec<usize> = (0..self.names.len()).filter(|&i| self.names[i] != "1").collect();
        Design {
            names: keep.iter().map(|&i| self.names[i].clone()).collect(),
            x: self.x.select_columns(&keep),
        }
    }
}

/// History design for time `j` (1-based).
///
/// Column order: `1`, baseline covariates (minus `exclude`), `A1..A{j-1}`,
/// `Y1..Y{j-1}`, `V1..Vj` when present, then `t1..tj`. Time columns that are
/// identical for every individual carry no information beyond the intercept
/// and are left out.
pub fn history_design(panel: &PanelData, j: usize, exclude: &HashSet<String>) -> Result<Design> {
    let k = panel.k();
    if j == 0 || j > k {
        return Err(Error::BadTimeIndex { index: j, k });
    }
    let n = panel.n();
    let mut names = vec!["1".to_string()];
    let mut cols: Vec<DVector<f64>> = vec![DVector::from_element(n, 1.0)];
    let mut push = |name: String, col: DVector<f64>| {
        if !exclude.contains(&name) {
            names.push(name);
            cols.push(col);
        }
    };
    for (c, name) in panel.l0_names.iter().enumerate() {
        push(name.clone(), panel.l0.column(c).into_owned());
    }
    for s in 1..j {
        push(format!("A{s}"), panel.a_col(s));
    }
    for s in 1..j {
        push(format!("Y{s}"), panel.y_col(s));
    }
    if let Some(v) = &panel.v {
        for s in 1..=j {
            push(format!("V{s}"), v.column(s - 1).into_owned());
        }
    }
    for s in 1..=j {
        let col = panel.t.column(s - 1).into_owned();
        let first = col[0];
        if col.iter().any(|v| (v - first).abs() > 1e-12) {
            push(format!("t{s}"), col);
        }
    }
    Ok(Design { names, x: DMatrix::from_columns(&cols) })
}

/// Column mapping for a wide CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub id: String,
    #[serde(rename = "A")]
    pub a: Vec<String>,
    #[serde(rename = "Y")]
    pub y: Vec<String>,
    /// Measurement-time columns; `t_k = k` when omitted.
    #[serde(default)]
    pub t: Option<Vec<String>>,
    #[serde(rename = "L0", default)]
    pub l0: Vec<String>,
    /// Subset of `L0` to one-hot encode.
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(rename = "V", default)]
    pub v: Option<Vec<String>>,
    #[serde(rename = "G", default)]
    pub g: Option<String>,
    /// Rows with any exposure above this are dropped at load.
    #[serde(default = "default_cap")]
    pub exposure_cap: Option<f64>,
}

fn default_cap() -> Option<f64> {
    Some(DEFAULT_MPR_CAP)
}

pub const DEFAULT_MPR_CAP: f64 = 200.0;

impl ColumnSpec {
    /// The layout written by [`save_panel`] for a panel with `k` visits.
    pub fn standard(k: usize, l0_names: &[String], has_v: bool, has_g: bool) -> Self {
        let seq = |p: &str| (1..=k).map(|s| format!("{p}{s}")).collect::<Vec<_>>();
        ColumnSpec {
            id: "id".into(),
            a: seq("A"),
            y: seq("Y"),
            t: Some(seq("t")),
            l0: l0_names.to_vec(),
            categorical: vec![],
            v: has_v.then(|| seq("V")),
            g: has_g.then(|| "G".into()),
            exposure_cap: None,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Read a wide CSV into a validated panel.
pub fn load_panel(path: &Path, spec: &ColumnSpec) -> Result<PanelData> {
    let mut reader = csv::Reader::from_path(path)?;
    read_panel(&mut reader, spec)
}

pub fn read_panel<R: std::io::Read>(reader: &mut csv::Reader<R>, spec: &ColumnSpec) -> Result<PanelData> {
    let k = spec.a.len();
    if spec.y.len() != k || spec.t.as_ref().is_some_and(|t| t.len() != k) || spec.v.as_ref().is_some_and(|v| v.len() != k) {
        return Err(Error::InvalidConfig("A, Y, t and V need one column per time point".into()));
    }
    let headers = reader.headers()?.clone();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let find = |name: &str| index.get(name).copied().ok_or_else(|| Error::MissingColumn(name.to_string()));
    let id_col = find(&spec.id)?;
    let a_cols = spec.a.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let y_cols = spec.y.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let t_cols = spec.t.as_ref().map(|t| t.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()).transpose()?;
    let v_cols = spec.v.as_ref().map(|v| v.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()).transpose()?;
    let l0_cols = spec.l0.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let g_col = spec.g.as_ref().map(|g| find(g)).transpose()?;
    for c in &spec.categorical {
        if !spec.l0.contains(c) {
            return Err(Error::InvalidConfig(format!("categorical column `{c}` is not listed in L0")));
        }
    }

    let records: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
    let parse = |rec: &csv::StringRecord, row: usize, col: usize| -> Result<f64> {
        let raw = rec.get(col).unwrap_or("").trim();
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(Error::NonFiniteValue { row, col: headers[col].to_string() }),
        }
    };

    let mut ids = Vec::new();
    let mut a_rows = Vec::new();
    let mut y_rows = Vec::new();
    let mut t_rows = Vec::new();
    let mut v_rows = Vec::new();
    let mut g_vals = Vec::new();
    let mut l0_raw: Vec<Vec<String>> = Vec::new();
    let mut dropped = 0usize;
    for (row, rec) in records.iter().enumerate() {
        let a: Vec<f64> = a_cols.iter().map(|&c| parse(rec, row, c)).collect::<Result<_>>()?;
        if let Some(cap) = spec.exposure_cap {
            if a.iter().any(|v| *v > cap) {
                dropped += 1;
                continue;
            }
        }
        ids.push(rec.get(id_col).unwrap_or("").to_string());
        a_rows.push(a);
        y_rows.push(y_cols.iter().map(|&c| parse(rec, row, c)).collect::<Result<Vec<_>>>()?);
        t_rows.push(match &t_cols {
            Some(tc) => tc.iter().map(|&c| parse(rec, row, c)).collect::<Result<Vec<_>>>()?,
            None => (1..=k).map(|s| s as f64).collect(),
        });
        if let Some(vc) = &v_cols {
            v_rows.push(vc.iter().map(|&c| parse(rec, row, c)).collect::<Result<Vec<_>>>()?);
        }
        if let Some(gc) = g_col {
            g_vals.push(parse(rec, row, gc)?);
        }
        let mut raw = Vec::with_capacity(l0_cols.len());
        for (name, &c) in spec.l0.iter().zip(&l0_cols) {
            if spec.categorical.contains(name) {
                raw.push(rec.get(c).unwrap_or("").trim().to_string());
            } else {
                raw.push(parse(rec, row, c)?.to_string());
            }
        }
        l0_raw.push(raw);
    }
    if dropped > 0 {
        log::info!("dropped {dropped} rows with exposure above the cap");
    }

    let n = ids.len();
    let to_matrix = |rows: &[Vec<f64>], width: usize| DMatrix::from_fn(n, width, |r, c| rows[r][c]);

    let mut l0_names = Vec::new();
    let mut l0_cols_out: Vec<DVector<f64>> = Vec::new();
    for (c, name) in spec.l0.iter().enumerate() {
        if spec.categorical.contains(name) {
            let mut levels: Vec<String> = Vec::new();
            for row in &l0_raw {
                if !levels.contains(&row[c]) {
                    levels.push(row[c].clone());
                }
            }
            for level in levels.iter().skip(1) {
                l0_names.push(format!("{name}={level}"));
                l0_cols_out.push(DVector::from_iterator(n, l0_raw.iter().map(|row| (row[c] == *level) as u8 as f64)));
            }
        } else {
            l0_names.push(name.clone());
            l0_cols_out.push(DVector::from_iterator(n, l0_raw.iter().map(|row| row[c].parse::<f64>().expect("parsed above"))));
        }
    }
    let l0 = if l0_cols_out.is_empty() { DMatrix::zeros(n, 0) } else { DMatrix::from_columns(&l0_cols_out) };

    let panel = PanelData {
        ids,
        a: to_matrix(&a_rows, k),
        y: to_matrix(&y_rows, k),
        t: to_matrix(&t_rows, k),
        l0,
        l0_names,
        v: v_cols.is_some().then(|| to_matrix(&v_rows, k)),
        g: g_col.is_some().then(|| DVector::from_vec(g_vals)),
        latent: BTreeMap::new(),
    };
    panel.validate()?;
    Ok(panel)
}

/// Write a panel in the [`ColumnSpec::standard`] layout.
pub fn save_panel(panel: &PanelData, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = csv::Writer::from_writer(file);
    write_panel(panel, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_panel<W: std::io::Write>(panel: &PanelData, w: &mut csv::Writer<W>) -> Result<()> {
    let spec = ColumnSpec::standard(panel.k(), &panel.l0_names, panel.v.is_some(), panel.g.is_some());
    let mut header = vec![spec.id.clone()];
    header.extend(spec.a.iter().cloned());
    header.extend(spec.y.iter().cloned());
    header.extend(spec.t.clone().unwrap_or_default());
    header.extend(spec.l0.iter().cloned());
    if let Some(v) = &spec.v {
        header.extend(v.iter().cloned());
    }
    if let Some(g) = &spec.g {
        header.push(g.clone());
    }
    w.write_record(&header)?;
    for i in 0..panel.n() {
        let mut rec = vec![panel.ids[i].clone()];
        let mut push_row = |m: &DMatrix<f64>| rec.extend(m.row(i).iter().map(|v| v.to_string()));
        push_row(&panel.a);
        push_row(&panel.y);
        push_row(&panel.t);
        push_row(&panel.l0);
        if let Some(v) = &panel.v {
            push_row(v);
        }
        if let Some(g) = &panel.g {
            rec.push(g[i].to_string());
        }
        w.write_record(&rec)?;
    }
    Ok(())
}

/// Pivot a long CSV (one row per id × visit) into the wide layout.
///
/// Visits are ordered by `time_col` within each id; ids keep first-appearance
/// order. Each value column `X` becomes `X1..XK`; every id must have the same
/// number of visits.
pub fn long_to_wide(input: &Path, output: &Path, id_col: &str, time_col: &str, value_cols: &[String], static_cols: &[String]) -> Result<usize> {
    let mut reader = csv::Reader::from_path(input)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(name.to_string()));
    let idc = find(id_col)?;
    let tc = find(time_col)?;
    let vcs = value_cols.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let scs = static_cols.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(f64, csv::StringRecord)>> = HashMap::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let id = rec.get(idc).unwrap_or("").to_string();
        let t: f64 = rec
            .get(tc)
            .and_then(|s| s.trim().parse().ok())
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::NonFiniteValue { row, col: time_col.to_string() })?;
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push((t, rec));
    }
    let k = order.first().map(|id| groups[id].len()).unwrap_or(0);
    let mut w = csv::Writer::from_path(output)?;
    let mut header = vec![id_col.to_string()];
    for c in value_cols {
        header.extend((1..=k).map(|s| format!("{c}{s}")));
    }
    header.extend((1..=k).map(|s| format!("{time_col}{s}")));
    header.extend(static_cols.iter().cloned());
    w.write_record(&header)?;
    for id in &order {
        let visits = groups.get_mut(id).expect("grouped");
        if visits.len() != k {
            return Err(Error::InvalidConfig(format!("id `{id}` has {} visits, expected {k}", visits.len())));
        }
        visits.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut rec = vec![id.clone()];
        for &vc in &vcs {
            rec.extend(visits.iter().map(|(_, r)| r.get(vc).unwrap_or("").to_string()));
        }
        rec.extend(visits.iter().map(|(t, _)| t.to_string()));
        rec.extend(scs.iter().map(|&sc| visits[0].1.get(sc).unwrap_or("").to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(order.len())
}

/// Medication possession ratio in percent: `100 · tablets / days`.
pub fn compute_mpr(tablets: f64, period_days: f64) -> Result<f64> {
    if !(period_days > 0.0) {
        return Err(Error::ZeroPeriod);
    }
    if !(tablets >= 0.0) {
        return Err(Error::InvalidConfig("tablet count must be non-negative".into()));
    }
    Ok(100.0 * tablets / period_days)
}

/// Whether an MPR value should be excluded as extreme.
pub fn mpr_exceeds_cap(mpr: f64, cap: f64) -> bool {
    mpr > cap
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LdlDenominator {
    /// `(LDL_k − LDL_0) / LDL_k`
    #[default]
    Current,
    /// `(LDL_k − LDL_0) / LDL_0`
    Baseline,
}

/// Relative LDL change used as the outcome.
pub fn compute_ldl_outcome(ldl_k: f64, ldl_0: f64, denominator: LdlDenominator) -> Result<f64> {
    let d = match denominator {
        LdlDenominator::Current => ldl_k,
        LdlDenominator::Baseline => ldl_0,
    };
    if !(d > 0.0) {
        return Err(Error::NonPositiveDenominator(d));
    }
    Ok((ldl_k - ldl_0) / d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mpr_values() {
        assert_eq!(compute_mpr(56.0, 56.0).unwrap(), 100.0);
        assert_eq!(compute_mpr(28.0, 56.0).unwrap(), 50.0);
        assert_eq!(compute_mpr(0.0, 30.0).unwrap(), 0.0);
        assert!(matches!(compute_mpr(10.0, 0.0), Err(Error::ZeroPeriod)));
        assert!(mpr_exceeds_cap(compute_mpr(500.0, 200.0).unwrap(), DEFAULT_MPR_CAP));
        assert!(!mpr_exceeds_cap(150.0, DEFAULT_MPR_CAP));
    }

    #[test]
    fn ldl_values() {
        assert_eq!(compute_ldl_outcome(4.0, 4.0, LdlDenominator::Current).unwrap(), 0.0);
        assert_eq!(compute_ldl_outcome(2.0, 4.0, LdlDenominator::Current).unwrap(), -1.0);
        assert_eq!(compute_ldl_outcome(2.0, 4.0, LdlDenominator::Baseline).unwrap(), -0.5);
        assert!(matches!(
            compute_ldl_outcome(0.0, 4.0, LdlDenominator::Current),
            Err(Error::NonPositiveDenominator(_))
        ));
    }

    fn tiny_panel(k: usize, n: usize) -> PanelData {
        let a = DMatrix::from_fn(n, k, |i, s| (i * 3 + s * 7) as f64 % 5.0);
        let y = DMatrix::from_fn(n, k, |i, s| (i * 5 + s) as f64 % 3.0);
        let t = DMatrix::from_fn(n, k, |i, s| s as f64 + 1.0 + 0.1 * (i % 3) as f64);
        PanelData {
            ids: (0..n).map(|i| i.to_string()).collect(),
            a,
            y,
            t,
            l0: DMatrix::from_fn(n, 2, |i, c| (i + c) as f64),
            l0_names: vec!["L0a".into(), "L0b".into()],
            v: None,
            g: None,
            latent: BTreeMap::new(),
        }
    }

    #[test]
    fn first_history_has_no_past() {
        let p = tiny_panel(3, 10);
        let d = history_design(&p, 1, &HashSet::new()).unwrap();
        assert_eq!(d.names, vec!["1", "L0a", "L0b", "t1"]);
    }

    #[test]
    fn third_history_includes_lags() {
        let p = tiny_panel(3, 10);
        let d = history_design(&p, 3, &HashSet::new()).unwrap();
        for c in ["A1", "A2", "Y1", "Y2"] {
            assert!(d.names.iter().any(|n| n == c), "{c} missing");
        }
        for c in ["A3", "Y3"] {
            assert!(!d.names.iter().any(|n| n == c));
        }
    }

    #[test]
    fn bad_time_index() {
        let p = tiny_panel(3, 10);
        assert!(matches!(history_design(&p, 0, &HashSet::new()), Err(Error::BadTimeIndex { .. })));
        assert!(matches!(history_design(&p, 4, &HashSet::new()), Err(Error::BadTimeIndex { .. })));
    }

    #[test]
    fn exclusion_removes_column() {
        let p = tiny_panel(2, 10);
        let ex: HashSet<String> = ["L0a".to_string()].into();
        let d = history_design(&p, 2, &ex).unwrap();
        assert!(!d.names.contains(&"L0a".to_string()));
    }

    #[test]
    fn validation_catches_non_increasing_times() {
        let mut p = tiny_panel(2, 10);
        p.t[(4, 1)] = p.t[(4, 0)];
        assert!(matches!(p.validate(), Err(Error::NonIncreasingTimes(id)) if id == "4"));
    }

    #[test]
    fn validation_counts_rows() {
        let p = tiny_panel(3, 6);
        assert!(matches!(p.validate(), Err(Error::TooFewRows { .. })));
    }
}
