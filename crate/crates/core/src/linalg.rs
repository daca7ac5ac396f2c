//! Small dense linear algebra and regression helpers.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("power iteration stalled after {0} steps")]
    Stalled(usize),
    #[error("singular system")]
    Singular,
    #[error("not enough data for a fit")]
    TooFewPoints,
}

/// Solves `a x = b` by LU with partial pivoting.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().lu().solve(b)
}

/// Perron root and eigenvectors of a nonnegative irreducible matrix.
#[derive(Clone, Debug)]
pub struct Perron {
    pub rho: f64,
    /// Right eigenvector, positive, summing to one.
    pub right: DVector<f64>,
    /// Left eigenvector, positive, normalized so that `left · right = 1`.
    pub left: DVector<f64>,
    pub iterations: usize,
}

fn shift_for(a: &DMatrix<f64>) -> f64 {
    let sums: Vec<f64> = a.row_iter().map(|r| r.sum()).collect();
    let lo = sums.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = sums.iter().cloned().fold(0.0, f64::max);
    0.5 * (lo + hi).max(f64::MIN_POSITIVE)
}

fn power(
    a: &DMatrix<f64>,
    shift: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, DVector<f64>, usize), LinalgError> {
    let n = a.nrows();
    let mut v = DVector::from_element(n, 1.0 / n as f64);
    for it in 1..=max_iter {
        let mut w = a * &v + &v * shift;
        let s = w.sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(LinalgError::Stalled(it));
        }
        w /= s;
        let diff = (&w - &v).amax();
        v = w;
        if diff < tol {
            let rho = (a * &v).sum() / v.sum();
            return Ok((rho, v, it));
        }
    }
    Err(LinalgError::Stalled(max_iter))
}

/// Perron data by shifted power iteration; the shift makes periodic matrices primitive.
pub fn perron(a: &DMatrix<f64>) -> Result<Perron, LinalgError> {
    let shift = shift_for(a);
    let (rho, right, it1) = power(a, shift, 1e-15, 2_000_000)?;
    let at = a.transpose();
    let (_, mut left, it2) = power(&at, shift, 1e-15, 2_000_000)?;
    let dot = left.dot(&right);
    left /= dot;
    Ok(Perron {
        rho,
        right,
        left,
        iterations: it1 + it2,
    })
}

/// Spectral radius of a nonnegative irreducible matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64, LinalgError> {
    let shift = shift_for(a);
    power(a, shift, 1e-15, 2_000_000).map(|r| r.0)
}

/// Ordinary least squares with intercept-free design matrix columns.
#[derive(Clone, Debug, Serialize)]
pub struct LeastSquares {
    pub coef: Vec<f64>,
    pub r2: f64,
    pub residuals: Vec<f64>,
    /// Standard errors of the coefficients.
    pub stderr: Vec<f64>,
}

pub fn least_squares(design: &[Vec<f64>], y: &[f64]) -> Result<LeastSquares, LinalgError> {
    let n = y.len();
    let p = design.first().map_or(0, Vec::len);
    if n <= p || p == 0 {
        return Err(LinalgError::TooFewPoints);
    }
    let x = DMatrix::from_fn(n, p, |i, j| design[i][j]);
    let yv = DVector::from_column_slice(y);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &yv;
    let chol = xtx.clone().cholesky().ok_or(LinalgError::Singular)?;
    let beta = chol.solve(&xty);
    let fitted = &x * &beta;
    let resid: Vec<f64> = (0..n).map(|i| y[i] - fitted[i]).collect();
    let mean = y.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = resid.iter().map(|r| r * r).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    let sigma2 = ss_res / (n - p) as f64;
    let inv = chol.inverse();
    let stderr = (0..p).map(|j| (sigma2 * inv[(j, j)]).max(0.0).sqrt()).collect();
    Ok(LeastSquares {
        coef: beta.iter().copied().collect(),
        r2,
        residuals: resid,
        stderr,
    })
}

/// Straight-line fit `y = intercept + slope x`.
#[derive(Clone, Debug, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub slope_stderr: f64,
    pub residuals: Vec<f64>,
}

pub fn line_fit(x: &[f64], y: &[f64]) -> Result<LineFit, LinalgError> {
    let design: Vec<Vec<f64>> = x.iter().map(|&t| vec![1.0, t]).collect();
    let ls = least_squares(&design, y)?;
    Ok(LineFit {
        intercept: ls.coef[0],
        slope: ls.coef[1],
        r2: ls.r2,
        slope_stderr: ls.stderr[1],
        residuals: ls.residuals,
    })
}

/// Wald–Wolfowitz runs test on residual signs; returns the two-sided z-score.
pub fn runs_test_z(residuals: &[f64]) -> f64 {
    let signs: Vec<bool> = residuals.iter().filter(|r| **r != 0.0).map(|r| *r > 0.0).collect();
    let n1 = signs.iter().filter(|s| **s).count() as f64;
    let n2 = signs.len() as f64 - n1;
    if n1 == 0.0 || n2 == 0.0 {
        return f64::INFINITY;
    }
    let runs = 1 + signs.windows(2).filter(|w| w[0] != w[1]).count();
    let n = n1 + n2;
    let mu = 2.0 * n1 * n2 / n + 1.0;
    let var = 2.0 * n1 * n2 * (2.0 * n1 * n2 - n) / (n * n * (n - 1.0));
    if var <= 0.0 {
        return 0.0;
    }
    (runs as f64 - mu) / var.sqrt()
}
