//! Rolling sample covariance of return rates and portfolio variance.

use crate::error::{Error, Result};
use crate::market_data::ReturnMatrix;

pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Dense row-major symmetric matrix.
pub type Matrix = Vec<Vec<f64>>;

/// Per-period covariance matrices from a trailing window of returns.
///
/// `sigma[k]` is estimated from return columns `end[k] + 1 - window ..= end[k]`,
/// with `end[k] = window - 1 + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSeries {
    pub sigma: Vec<Matrix>,
    pub window: usize,
    pub ridge: f64,
}

impl CovarianceSeries {
    /// Index of the last return column included in `sigma[k]`.
    pub fn end_index(&self, k: usize) -> usize {
        self.window - 1 + k
    }

    /// Matrix whose window ends at return column `t`, if one was emitted.
    pub fn ending_at(&self, t: usize) -> Option<&Matrix> {
        t.checked_sub(self.window - 1).and_then(|k| self.sigma.get(k))
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }
}

/// Sample covariance (divisor `w - 1`) of the columns `[end + 1 - w, end]`, plus `ridge * I`.
pub fn window_covariance(returns: &ReturnMatrix, end: usize, w: usize, ridge: f64) -> Matrix {
    let n = returns.n_assets();
    let start = end + 1 - w;
    let means: Vec<f64> = returns
        .r
        .iter()
        .map(|row| row[start..=end].iter().sum::<f64>() / w as f64)
        .collect();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let c = (start..=end)
                .map(|t| (returns.r[i][t] - means[i]) * (returns.r[j][t] - means[j]))
                .sum::<f64>()
                / (w - 1) as f64;
            s[i][j] = c;
            s[j][i] = c;
        }
        s[i][i] += ridge;
    }
    s
}

pub fn rolling_covariance(returns: &ReturnMatrix, w: usize, ridge: f64) -> Result<CovarianceSeries> {
    if w < 2 {
        return Err(Error::InvalidArgument(format!("covariance window must be >= 2, got {w}")));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    let t = returns.n_periods();
    let sigma = (w.saturating_sub(1)..t)
        .map(|end| window_covariance(returns, end, w, ridge))
        .collect();
    Ok(CovarianceSeries {
        sigma,
        window: w,
        ridge,
    })
}

pub fn mat_vec(m: &Matrix, x: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// `a^T M b` for a square matrix.
pub fn quad_form(a: &[f64], m: &Matrix, b: &[f64]) -> f64 {
    a.iter()
        .zip(m)
        .map(|(ai, row)| ai * row.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
        .sum()
}

fn check_square(b: &[f64], sigma: &Matrix) -> Result<()> {
    if sigma.len() != b.len() || sigma.iter().any(|r| r.len() != b.len()) {
        return Err(Error::Shape(format!(
            "weights of length {} against a {}x{} covariance",
            b.len(),
            sigma.len(),
            sigma.first().map_or(0, Vec::len)
        )));
    }
    Ok(())
}

/// Portfolio variance `b^T Sigma b`.
pub fn portfolio_risk(b: &[f64], sigma: &Matrix) -> Result<f64> {
    check_square(b, sigma)?;
    Ok(quad_form(b, sigma, b))
}

/// Correlation matrix implied by a covariance matrix. Zero-variance assets get
/// unit self-correlation and zero cross-correlation.
pub fn correlation(sigma: &Matrix) -> Matrix {
    let sd: Vec<f64> = (0..sigma.len()).map(|i| sigma[i][i].max(0.0).sqrt()).collect();
    (0..sigma.len())
        .map(|i| {
            (0..sigma.len())
                .map(|j| {
                    if i == j {
                        1.0
                    } else if sd[i] > 0.0 && sd[j] > 0.0 {
                        (sigma[i][j] / (sd[i] * sd[j])).clamp(-1.0, 1.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_returns_give_ridge() {
        let r = ReturnMatrix {
            r: vec![vec![0.01; 6], vec![-0.02; 6]],
        };
        let cs = rolling_covariance(&r, 3, 1e-8).unwrap();
        assert_eq!(cs.len(), 4);
        for s in &cs.sigma {
            assert_eq!(s[0][0], 1e-8);
            assert_eq!(s[1][1], 1e-8);
            assert_eq!(s[0][1], 0.0);
        }
    }

    #[test]
    fn perfectly_correlated_pair() {
        let a = vec![0.01, -0.02, 0.03, 0.0, 0.015];
        let b: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();
        let r = ReturnMatrix { r: vec![a.clone(), b] };
        let cs = rolling_covariance(&r, 5, 0.0).unwrap();
        // hand computation: mean 0.007, squared deviations sum 0.00138 over 4
        let m = a.iter().sum::<f64>() / 5.0;
        let var = a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0;
        assert!((var - 0.000345).abs() < 1e-15);
        assert!((cs.sigma[0][0][1] - 2.0 * var).abs() < 1e-15);
        assert!((cs.sigma[0][1][1] - 4.0 * var).abs() < 1e-15);
    }

    #[test]
    fn risk_examples() {
        let s = vec![vec![0.04, 0.0], vec![0.0, 0.01]];
        assert_eq!(portfolio_risk(&[1.0, 0.0], &s).unwrap(), 0.04);
        assert!((portfolio_risk(&[0.5, 0.5], &s).unwrap() - 0.0125).abs() < 1e-16);
        let z = vec![vec![0.0; 2]; 2];
        assert_eq!(portfolio_risk(&[0.3, 0.7], &z).unwrap(), 0.0);
        assert!(matches!(portfolio_risk(&[1.0], &s), Err(Error::Shape(_))));
    }

    #[test]
    fn window_must_be_at_least_two() {
        let r = ReturnMatrix { r: vec![vec![0.0; 4]] };
        assert!(rolling_covariance(&r, 1, 0.0).is_err());
    }

    #[test]
    fn correlation_is_bounded() {
        let s = vec![vec![0.04, 0.01], vec![0.01, 0.01]];
        let c = correlation(&s);
        assert_eq!(c[0][0], 1.0);
        assert!((c[0][1] - 0.5).abs() < 1e-15);
    }
}
