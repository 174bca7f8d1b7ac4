//! Least squares and small dense solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative size below which a scaled R diagonal marks a dependent column.
const RANK_TOL: f64 = 1e-10;

/// Result of a (weighted) least-squares fit.
#[derive(Debug, Clone)]
pub struct RegFit {
    pub coef: DVector<f64>,
    pub residuals: DVector<f64>,
    pub fitted: DVector<f64>,
    /// (XᵀWX)⁻¹
    pub xtwx_inv: DMatrix<f64>,
    pub dof: usize,
}

/// A QR factorisation of `diag(√w)·X`, reusable for many right-hand sides.
///
/// Nuisance regressions residualise several vectors on the same history
/// design, so factoring once and projecting many times is the common path.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    sqrt_w: DVector<f64>,
    x: DMatrix<f64>,
}

impl LeastSquares {
    pub fn new(x: &DMatrix<f64>, w: Option<&DVector<f64>>, names: Option<&[String]>) -> Result<Self> {
        let (n, q) = x.shape();
        if let Some(w) = w {
            if w.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{} weights for {} rows",
                    w.len(),
                    n
                )));
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::NonPositiveWeights);
            }
            let positive = w.iter().filter(|v| **v > 0.0).count();
            if positive < q {
                return Err(Error::TooFewRows { have: positive, need: q });
            }
        }
        if n <= q {
            return Err(Error::TooFewRows { have: n, need: q + 1 });
        }
        let sqrt_w = match w {
            Some(w) => w.map(f64::sqrt),
            None => DVector::from_element(n, 1.0),
        };
        let mut xw = x.clone();
        for (i, mut row) in xw.row_iter_mut().enumerate() {
            row *= sqrt_w[i];
        }
        check_rank(&xw, names)?;
        let qr = xw.qr();
        Ok(Self { q: qr.q(), r: qr.r(), sqrt_w, x: x.clone() })
    }

    pub fn ncols(&self) -> usize {
        self.r.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn coef(&self, y: &DVector<f64>) -> DVector<f64> {
        let yw = y.component_mul(&self.sqrt_w);
        let qty = self.q.tr_mul(&yw);
        self.r
            .solve_upper_triangular(&qty)
            .expect("rank checked at construction")
    }

    pub fn fitted(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.x * self.coef(y)
    }

    /// `y` minus its least-squares projection onto the design.
    pub fn residualize(&self, y: &DVector<f64>) -> DVector<f64> {
        y - self.fitted(y)
    }

    /// (XᵀWX)⁻¹ = R⁻¹R⁻ᵀ
    pub fn xtwx_inv(&self) -> DMatrix<f64> {
        let q = self.ncols();
        let r_inv = self
            .r
            .solve_upper_triangular(&DMatrix::identity(q, q))
            .expect("rank checked at construction");
        &r_inv * r_inv.transpose()
    }

    pub fn fit(&self, y: &DVector<f64>) -> Result<RegFit> {
        if y.len() != self.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "response has {} rows, design has {}",
                y.len(),
                self.nrows()
            )));
        }
        let coef = self.coef(y);
        let fitted = &self.x * &coef;
        let residuals = y - &fitted;
        Ok(RegFit {
            coef,
            residuals,
            fitted,
            xtwx_inv: self.xtwx_inv(),
            dof: self.nrows() - self.ncols(),
        })
    }
}

fn check_rank(xw: &DMatrix<f64>, names: Option<&[String]>) -> Result<()> {
    let mut scaled = xw.clone();
    for mut col in scaled.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    let r = scaled.qr().r();
    let dependent: Vec<String> = (0..r.ncols())
        .filter(|&i| r[(i, i)].abs() < RANK_TOL)
        .map(|i| match names {
            Some(names) if i < names.len() => names[i].clone(),
            _ => format!("column {i}"),
        })
        .collect();
    if dependent.is_empty() {
        Ok(())
    } else {
        Err(Error::RankDeficient(dependent))
    }
}

/// Weighted least squares: argmin Σ wᵢ (yᵢ − xᵢᵀc)².
pub fn wls_fit(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> Result<RegFit> {
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "X has {} rows, y has {}",
            x.nrows(),
            y.len()
        )));
    }
    LeastSquares::new(x, Some(w), None)?.fit(y)
}

pub fn ols_fit(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<RegFit> {
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "X has {} rows, y has {}",
            x.nrows(),
            y.len()
        )));
    }
    LeastSquares::new(x, None, None)?.fit(y)
}

/// Solve a square system with partial pivoting.
pub fn solve_linear(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if !a.is_square() || a.nrows() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} system with rhs of length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let lu = a.clone().full_piv_lu();
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let u = lu.u();
    let min_pivot = (0..u.nrows()).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-14 * scale) {
        return Err(Error::SingularMomentSystem);
    }
    lu.solve(b).ok_or(Error::SingularMomentSystem)
}

/// Lower Cholesky factor of a symmetric PSD matrix.
///
/// On failure retries once with `1e-12·I` added (logged); a second failure is `NotPsd`.
pub fn cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch("cholesky of non-square matrix".into()));
    }
    if let Some(c) = a.clone().cholesky() {
        return Ok(c.l());
    }
    let jittered = a + DMatrix::identity(a.nrows(), a.ncols()) * 1e-12;
    match jittered.cholesky() {
        Some(c) => {
            log::warn!("cholesky needed 1e-12 jitter");
            Ok(c.l())
        }
        None => Err(Error::NotPsd),
    }
}

/// Factor for sampling: Cholesky where possible, otherwise the symmetric
/// eigen square root (handles exact zeros and singular PSD matrices).
pub fn psd_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.iter().all(|v| *v == 0.0) {
        return Ok(DMatrix::zeros(a.nrows(), a.ncols()));
    }
    if let Ok(l) = cholesky(a) {
        return Ok(l);
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().any(|v| *v < -1e-10 * scale) {
        return Err(Error::NotPsd);
    }
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root))
}

/// Moore–Penrose inverse via SVD.
pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.amax();
    let tol = f64::EPSILON * a.nrows().max(a.ncols()) as f64 * smax;
    svd.pseudo_inverse(tol)
        .unwrap_or_else(|_| DMatrix::zeros(a.ncols(), a.nrows()))
}

/// Sample covariance of the rows of `m` with divisor `n - ddof`.
pub fn row_covariance(m: &DMatrix<f64>, ddof: usize) -> DMatrix<f64> {
    let n = m.nrows();
    let mean = m.row_mean();
    let mut centered = m.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    centered.tr_mul(&centered) / (n - ddof) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unweighted_mean() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let y = DVector::from_vec(vec![2.0, 4.0]);
        let fit = wls_fit(&x, &y, &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_relative_eq!(fit.coef[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn weighted_mean() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let y = DVector::from_vec(vec![2.0, 4.0]);
        let fit = wls_fit(&x, &y, &DVector::from_vec(vec![3.0, 1.0])).unwrap();
        assert_relative_eq!(fit.coef[0], 2.5, epsilon = 1e-12);
    }

    #[test]
    fn exact_line() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![0.0, 1.0, 2.0]);
        let fit = wls_fit(&x, &y, &DVector::from_element(3, 1.0)).unwrap();
        assert_relative_eq!(fit.coef[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(fit.coef[1], 1.0, epsilon = 1e-12);
        assert_eq!(fit.dof, 1);
    }

    #[test]
    fn rank_deficiency_names_the_column() {
        let x = DMatrix::from_row_slice(4, 3, &[
            1.0, 1.0, 2.0, //
            1.0, 2.0, 4.0, //
            1.0, 3.0, 6.0, //
            1.0, 5.0, 10.0,
        ]);
        let names: Vec<String> = ["1", "a", "twice_a"].iter().map(|s| s.to_string()).collect();
        match LeastSquares::new(&x, None, Some(&names)) {
            Err(Error::RankDeficient(cols)) => assert_eq!(cols, vec!["twice_a".to_string()]),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch() {
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 1.0]);
        let y = DVector::from_vec(vec![1.0, 2.0]);
        assert!(matches!(
            wls_fit(&x, &y, &DVector::from_element(3, 1.0)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn weighted_normal_equations_hold() {
        let x = DMatrix::from_fn(50, 3, |i, j| if j == 0 { 1.0 } else { ((i * (j + 3)) % 7) as f64 + 0.1 * i as f64 });
        let y = DVector::from_fn(50, |i, _| (i as f64).sin() * 3.0 + i as f64 * 0.2);
        let w = DVector::from_fn(50, |i, _| 0.5 + (i % 4) as f64);
        let fit = wls_fit(&x, &y, &w).unwrap();
        let score = x.tr_mul(&fit.residuals.component_mul(&w));
        assert!(score.amax() < 1e-8, "{score}");
        let recon = &x * &fit.coef + &fit.residuals;
        assert!((recon - &y).amax() < 1e-10);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(cholesky(&a), Err(Error::NotPsd)));
        assert!(matches!(psd_factor(&a), Err(Error::NotPsd)));
    }

    #[test]
    fn solve_linear_roundtrip() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![3.0, 5.0]);
        let x = solve_linear(&a, &b).unwrap();
        assert_relative_eq!(x[0], 0.8, epsilon = 1e-12);
        assert_relative_eq!(x[1], 1.4, epsilon = 1e-12);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(solve_linear(&singular, &b).is_err());
    }
}
