//! Small statistics toolkit: moments, normal reference p-values, least
//! squares with HC2 robust errors, and ridge regression.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("design matrix is rank deficient ({cols} columns, {rows} rows)")]
    RankDeficient { rows: usize, cols: usize },
    #[error("need at least {need} observations, got {got}")]
    TooFewObservations { need: usize, got: usize },
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance (n − 1 denominator). Zero for fewer than two values.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn sd(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

pub fn normal_cdf(z: f64) -> f64 {
    std_normal().cdf(z)
}

pub fn normal_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

/// Two-sided p-value of a z statistic. `z = 0` (including 0/0) gives 1.
pub fn two_sided_p(estimate: f64, se: f64) -> f64 {
    if estimate == 0.0 {
        return 1.0;
    }
    if se <= 0.0 || !se.is_finite() {
        return 0.0;
    }
    let z = (estimate / se).abs();
    (2.0 * (1.0 - normal_cdf(z))).clamp(0.0, 1.0)
}

/// Welch two-sample t-test p-value (two-sided).
pub fn welch_t_p(a: &[f64], b: &[f64]) -> f64 {
    let (va, vb) = (variance(a) / a.len() as f64, variance(b) / b.len() as f64);
    let diff = mean(a) - mean(b);
    let se2 = va + vb;
    if diff == 0.0 {
        return 1.0;
    }
    if se2 <= 0.0 {
        return 0.0;
    }
    let t = diff / se2.sqrt();
    let df_den = va * va / (a.len() as f64 - 1.0) + vb * vb / (b.len() as f64 - 1.0);
    let df = if df_den > 0.0 {
        se2 * se2 / df_den
    } else {
        f64::INFINITY
    };
    if !df.is_finite() || df > 1e6 {
        return two_sided_p(diff, se2.sqrt());
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid df");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// Least-squares fit with HC2 heteroskedasticity-robust standard errors.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Centered R² when the design has an intercept, uncentered otherwise.
    pub r2: f64,
}

impl OlsFit {
    pub fn p_value(&self, j: usize) -> f64 {
        two_sided_p(self.coef[j], self.se[j])
    }
}

/// Inverse of X'X via Cholesky, refusing near-singular designs.
fn gram_inverse(x: &DMatrix<f64>) -> Result<DMatrix<f64>, StatsError> {
    let (n, p) = x.shape();
    let deficient = StatsError::RankDeficient { rows: n, cols: p };
    if n < p || p == 0 {
        return Err(deficient);
    }
    let xtx = x.transpose() * x;
    let chol = xtx.clone().cholesky().ok_or(deficient.clone())?;
    let l = chol.l();
    let diag: Vec<f64> = (0..p).map(|i| l[(i, i)] * l[(i, i)]).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if max <= 0.0 || min / max < 1e-12 {
        return Err(deficient);
    }
    Ok(chol.inverse())
}

/// OLS of `y` on the columns of `x` (no intercept is added).
pub fn ols_hc2(x: &DMatrix<f64>, y: &[f64]) -> Result<OlsFit, StatsError> {
    let (n, p) = x.shape();
    assert_eq!(n, y.len(), "design rows must match response length");
    let inv = gram_inverse(x)?;
    let yv = DVector::from_column_slice(y);
    let beta = &inv * (x.transpose() * &yv);
    let fitted = x * &beta;
    let resid: Vec<f64> = (0..n).map(|i| y[i] - fitted[i]).collect();

    // meat = Σ x_i x_i' e_i² / (1 − h_ii)
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        let xi = x.row(i).transpose();
        let h = (xi.transpose() * &inv * &xi)[(0, 0)];
        let w = resid[i] * resid[i] / (1.0 - h).max(1e-12);
        meat += &xi * xi.transpose() * w;
    }
    let cov = &inv * meat * &inv;
    let se = (0..p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();

    let has_intercept = (0..p).any(|j| (0..n).all(|i| x[(i, j)] == 1.0));
    let ssr: f64 = resid.iter().map(|e| e * e).sum();
    let sst: f64 = if has_intercept {
        let m = mean(y);
        y.iter().map(|v| (v - m) * (v - m)).sum()
    } else {
        y.iter().map(|v| v * v).sum()
    };
    let r2 = if sst > 0.0 { 1.0 - ssr / sst } else { 1.0 };
    Ok(OlsFit {
        coef: beta.iter().cloned().collect(),
        se,
        residuals: resid,
        r2,
    })
}

/// Ridge regression with an unpenalized intercept on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct Ridge {
    pub intercept: f64,
    pub coef: Vec<f64>,
}

impl Ridge {
    /// Fit on row-major features. `lambda` is applied to the standardized
    /// coefficients, scaled by the number of rows.
    pub fn fit(rows: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<Ridge, StatsError> {
        let n = rows.len();
        if n == 0 {
            return Err(StatsError::TooFewObservations { need: 1, got: 0 });
        }
        let p = rows[0].len();
        let mut center = vec![0.0; p];
        let mut scale = vec![1.0; p];
        for j in 0..p {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            center[j] = mean(&col);
            let s = (col.iter().map(|v| (v - center[j]).powi(2)).sum::<f64>() / n as f64).sqrt();
            scale[j] = if s > 1e-12 { s } else { 0.0 };
        }
        let ym = mean(y);
        let mut xtx = DMatrix::<f64>::zeros(p, p);
        let mut xty = DVector::<f64>::zeros(p);
        let mut z = vec![0.0; p];
        for (r, &yi) in rows.iter().zip(y) {
            for j in 0..p {
                z[j] = if scale[j] > 0.0 {
                    (r[j] - center[j]) / scale[j]
                } else {
                    0.0
                };
            }
            for a in 0..p {
                xty[a] += z[a] * (yi - ym);
                for b in a..p {
                    xtx[(a, b)] += z[a] * z[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtx[(a, b)] = xtx[(b, a)];
            }
            xtx[(a, a)] += lambda.max(1e-12) * n as f64;
        }
        let coef_std = match xtx.cholesky() {
            Some(c) => c.solve(&xty),
            None => return Err(StatsError::RankDeficient { rows: n, cols: p }),
        };
        let coef: Vec<f64> = (0..p)
            .map(|j| {
                if scale[j] > 0.0 {
                    coef_std[j] / scale[j]
                } else {
                    0.0
                }
            })
            .collect();
        let intercept = ym - coef.iter().zip(&center).map(|(c, m)| c * m).sum::<f64>();
        Ok(Ridge { intercept, coef })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }

    /// A model that always predicts zero.
    pub fn zero(p: usize) -> Ridge {
        Ridge {
            intercept: 0.0,
            coef: vec![0.0; p],
        }
    }
}

/// Pool-adjacent-violators fit of a non-increasing sequence.
pub fn isotonic_decreasing(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a >= b {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().unwrap();
            *last = ((a * na as f64 + b * nb as f64) / (na + nb) as f64, na + nb);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(v, n)| std::iter::repeat_n(v, n))
        .collect()
}
