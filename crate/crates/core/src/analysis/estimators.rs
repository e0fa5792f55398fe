//! Average treatment effect estimators.

use super::{pct_of, AnalysisError, EstimateReport, Estimator, Sample};
use crate::seed;
use crate::stats::{mean, ols_hc2, sd, two_sided_p, variance, Ridge};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

fn check_arms(n_t: usize, n_c: usize) -> Result<(), AnalysisError> {
    if n_t < 2 {
        return Err(AnalysisError::DegenerateArm {
            arm: "treatment",
            n: n_t,
        });
    }
    if n_c < 2 {
        return Err(AnalysisError::DegenerateArm {
            arm: "control",
            n: n_c,
        });
    }
    Ok(())
}

fn report(
    s: &Sample,
    estimator: Estimator,
    estimate: f64,
    se: f64,
    n_t: usize,
    n_c: usize,
    baseline: f64,
) -> EstimateReport {
    EstimateReport {
        estimator,
        outcome: s.outcome.clone(),
        filter: s.filter.clone(),
        estimate,
        std_error: se,
        p_value: two_sided_p(estimate, se),
        pct_of_baseline: pct_of(estimate, baseline),
        n_treated: n_t,
        n_control: n_c,
    }
}

/// Difference in arm means with the unequal-variance standard error.
pub fn diff_in_means(s: &Sample) -> Result<EstimateReport, AnalysisError> {
    let (t, c) = s.split();
    check_arms(t.len(), c.len())?;
    let est = mean(&t) - mean(&c);
    let se = (variance(&t) / t.len() as f64 + variance(&c) / c.len() as f64).sqrt();
    Ok(report(
        s,
        Estimator::DiffInMeans,
        est,
        se,
        t.len(),
        c.len(),
        mean(&c),
    ))
}

fn non_constant_columns(rows: &[Vec<f64>]) -> Vec<usize> {
    let p = rows.first().map_or(0, |r| r.len());
    (0..p)
        .filter(|&j| rows.iter().any(|r| r[j] != rows[0][j]))
        .collect()
}

/// OLS of the outcome on an intercept, the arm indicator and the covariate
/// rows (aligned with `s.users`). Columns constant within the sample are
/// dropped; HC2 standard error on the arm coefficient.
pub fn regression_adjusted_ate(
    s: &Sample,
    covariates: &[Vec<f64>],
) -> Result<EstimateReport, AnalysisError> {
    assert_eq!(covariates.len(), s.len(), "one covariate row per user");
    let (t, c) = s.split();
    check_arms(t.len(), c.len())?;
    let keep = non_constant_columns(covariates);
    let p = 2 + keep.len();
    let x = DMatrix::from_fn(s.len(), p, |i, j| match j {
        0 => 1.0,
        1 => s.treated[i] as u8 as f64,
        _ => covariates[i][keep[j - 2]],
    });
    let fit = ols_hc2(&x, &s.y)?;
    Ok(report(
        s,
        Estimator::RegressionAdjusted,
        fit.coef[1],
        fit.se[1],
        t.len(),
        c.len(),
        mean(&c),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AipwConfig {
    pub folds: usize,
    pub ridge_lambda: f64,
    pub propensity: f64,
    pub seed: u64,
}

impl Default for AipwConfig {
    fn default() -> Self {
        AipwConfig {
            folds: 5,
            ridge_lambda: 0.1,
            propensity: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AipwResult {
    pub report: EstimateReport,
    pub scores: Vec<f64>,
    pub m1: Vec<f64>,
    pub m0: Vec<f64>,
}

/// Per-unit AIPW scores for given nuisance predictions.
pub fn aipw_scores(
    y: &[f64],
    treated: &[bool],
    m1: &[f64],
    m0: &[f64],
    p: f64,
) -> Result<Vec<f64>, AnalysisError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(AnalysisError::PropensityOutOfRange(p));
    }
    Ok((0..y.len())
        .map(|i| {
            let mut v = m1[i] - m0[i];
            if treated[i] {
                v += (y[i] - m1[i]) / p;
            } else {
                v -= (y[i] - m0[i]) / (1.0 - p);
            }
            v
        })
        .collect())
}

fn fit_arm(rows: &[&Vec<f64>], y: &[f64], lambda: f64) -> Ridge {
    let p = rows.first().map_or(0, |r| r.len());
    if rows.len() < 2 || p == 0 {
        return Ridge {
            intercept: if y.is_empty() { 0.0 } else { mean(y) },
            coef: vec![0.0; p],
        };
    }
    let owned: Vec<Vec<f64>> = rows.iter().map(|r| (*r).clone()).collect();
    Ridge::fit(&owned, y, lambda).unwrap_or_else(|_| Ridge {
        intercept: mean(y),
        coef: vec![0.0; p],
    })
}

/// Cross-fitted AIPW: each fold's arm-specific ridge outcome models are fit
/// on the other folds. Fold assignment is a seeded shuffle.
pub fn aipw_ate(
    s: &Sample,
    covariates: &[Vec<f64>],
    cfg: &AipwConfig,
) -> Result<AipwResult, AnalysisError> {
    assert_eq!(covariates.len(), s.len(), "one covariate row per user");
    if !(cfg.propensity > 0.0 && cfg.propensity < 1.0) {
        return Err(AnalysisError::PropensityOutOfRange(cfg.propensity));
    }
    let (t, c) = s.split();
    check_arms(t.len(), c.len())?;
    let n = s.len();
    let k = cfg.folds.clamp(2, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(
        cfg.seed,
        &[seed::tag("aipw-folds")],
    )));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    let mut m1 = vec![0.0; n];
    let mut m0 = vec![0.0; n];
    for f in 0..k {
        let (mut r1, mut y1, mut r0, mut y0) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in (0..n).filter(|&i| fold[i] != f) {
            if s.treated[i] {
                r1.push(&covariates[i]);
                y1.push(s.y[i]);
            } else {
                r0.push(&covariates[i]);
                y0.push(s.y[i]);
            }
        }
        let (g1, g0) = (
            fit_arm(&r1, &y1, cfg.ridge_lambda),
            fit_arm(&r0, &y0, cfg.ridge_lambda),
        );
        for i in (0..n).filter(|&i| fold[i] == f) {
            m1[i] = g1.predict(&covariates[i]);
            m0[i] = g0.predict(&covariates[i]);
        }
    }
    let scores = aipw_scores(&s.y, &s.treated, &m1, &m0, cfg.propensity)?;
    let est = mean(&scores);
    let se = sd(&scores) / (n as f64).sqrt();
    let report = report(s, Estimator::Aipw, est, se, t.len(), c.len(), mean(&c));
    Ok(AipwResult {
        report,
        scores,
        m1,
        m0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_difference() {
        let s = Sample::from_values(
            vec![1.0, 2.0, 3.0, 0.0, 1.0, 2.0],
            vec![true, true, true, false, false, false],
        );
        let r = diff_in_means(&s).unwrap();
        assert!((r.estimate - 1.0).abs() < 1e-15);
        assert!((r.std_error - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((r.pct_of_baseline - 100.0).abs() < 1e-12);
        let z = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((r.p_value - 2.0 * (1.0 - crate::stats::normal_cdf(z))).abs() < 1e-15);
    }

    #[test]
    fn degenerate_arm() {
        let s = Sample::from_values(vec![1.0, 2.0, 3.0], vec![true, true, false]);
        assert_eq!(
            diff_in_means(&s),
            Err(AnalysisError::DegenerateArm {
                arm: "control",
                n: 1
            })
        );
    }

    #[test]
    fn constant_covariates_reproduce_difference_in_means() {
        let s = Sample::from_values(
            vec![1.0, 4.0, 2.0, 0.5, 1.0, 3.0, 2.5],
            vec![true, true, true, false, false, false, false],
        );
        let cov = vec![vec![3.0, 1.0]; 7];
        let a = diff_in_means(&s).unwrap();
        let b = regression_adjusted_ate(&s, &cov).unwrap();
        assert!((a.estimate - b.estimate).abs() < 1e-12);
        // HC2 on a lone binary regressor is the unequal-variance error
        assert!((a.std_error - b.std_error).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_covariate_leaves_estimate_unchanged() {
        // x is balanced within each arm and uncorrelated with y inside arms
        let y = vec![1.0, 3.0, 1.0, 3.0, 0.0, 2.0, 0.0, 2.0];
        let x = [1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0];
        let treated = vec![true, true, true, true, false, false, false, false];
        let s = Sample::from_values(y, treated);
        let cov: Vec<Vec<f64>> = x.iter().map(|v| vec![*v]).collect();
        let a = diff_in_means(&s).unwrap();
        let b = regression_adjusted_ate(&s, &cov).unwrap();
        assert!((a.estimate - b.estimate).abs() < 1e-10);
    }

    #[test]
    fn collinear_covariates_are_rank_deficient() {
        let s = Sample::from_values(
            vec![1.0, 2.0, 3.0, 4.0, 2.0, 1.0],
            vec![true, true, true, false, false, false],
        );
        let cov: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        assert!(matches!(
            regression_adjusted_ate(&s, &cov),
            Err(AnalysisError::Stats(_))
        ));
    }

    #[test]
    fn zero_nuisance_is_ipw() {
        let y = [2.0, 1.0, 5.0, 0.0, 3.0, 1.0];
        let a = [true, false, true, false, true, false];
        let z = vec![0.0; 6];
        let scores = aipw_scores(&y, &a, &z, &z, 0.5).unwrap();
        let ipw = 2.0 * (2.0 + 5.0 + 3.0) / 6.0 - 2.0 * (1.0 + 0.0 + 1.0) / 6.0;
        assert!((mean(&scores) - ipw).abs() < 1e-12);
        let dim = diff_in_means(&Sample::from_values(y.to_vec(), a.to_vec())).unwrap();
        assert!((mean(&scores) - dim.estimate).abs() < 1e-10);
    }

    #[test]
    fn perfect_nuisance_gives_constant_scores() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let a: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        let m0: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let m1: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.5).collect();
        let y: Vec<f64> = (0..10).map(|i| if a[i] { m1[i] } else { m0[i] }).collect();
        let s = aipw_scores(&y, &a, &m1, &m0, 0.3).unwrap();
        assert!(s.iter().all(|v| (v - 1.5).abs() < 1e-12));
        assert_eq!(sd(&s), 0.0);
    }

    #[test]
    fn propensity_bounds() {
        let s = Sample::from_values(vec![1.0, 2.0, 3.0, 4.0], vec![true, true, false, false]);
        for p in [0.0, 1.0, -0.1, f64::NAN] {
            let cfg = AipwConfig {
                propensity: p,
                ..Default::default()
            };
            assert!(matches!(
                aipw_ate(&s, &vec![vec![]; 4], &cfg),
                Err(AnalysisError::PropensityOutOfRange(_))
            ));
        }
    }

    #[test]
    fn aipw_without_covariates_is_near_difference() {
        let y: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64).collect();
        let a: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let s = Sample::from_values(y, a);
        let r = aipw_ate(&s, &vec![vec![]; 40], &AipwConfig::default()).unwrap();
        let d = diff_in_means(&s).unwrap();
        assert!((r.report.estimate - d.estimate).abs() < d.std_error);
    }

    proptest! {
        #[test]
        fn invariant_to_order_and_non_launchers(ys in prop::collection::vec(0.0f64..10.0, 6..30), rot in 0usize..30) {
            let a: Vec<bool> = (0..ys.len()).map(|i| i % 2 == 0).collect();
            let base = diff_in_means(&Sample::from_values(ys.clone(), a.clone())).unwrap();
            let r = rot % ys.len();
            let mut y2 = ys.clone();
            let mut a2 = a.clone();
            y2.rotate_left(r);
            a2.rotate_left(r);
            let rotated = diff_in_means(&Sample::from_values(y2, a2)).unwrap();
            prop_assert!((base.estimate - rotated.estimate).abs() < 1e-9);
            prop_assert!((base.std_error - rotated.std_error).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&base.p_value));
        }

        #[test]
        fn zero_nuisance_balanced_equals_difference(ys in prop::collection::vec(0.0f64..5.0, 2..20)) {
            let n = ys.len() * 2;
            let y: Vec<f64> = ys.iter().chain(ys.iter().map(|v| v * 0.5).collect::<Vec<_>>().iter()).copied().collect();
            let a: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
            let z = vec![0.0; n];
            let sc = aipw_scores(&y, &a, &z, &z, 0.5).unwrap();
            let d = diff_in_means(&Sample::from_values(y, a)).unwrap();
            prop_assert!((mean(&sc) - d.estimate).abs() < 1e-10);
        }
    }
}
