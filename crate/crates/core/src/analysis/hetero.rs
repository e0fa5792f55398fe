//! Treatment-effect heterogeneity: subgroup effects, regressions of AIPW
//! scores on user types, and model calibration.

use super::{diff_in_means, AnalysisError, Outcome, OutcomeVector, Sample};
use crate::log::{LogDataset, Section, UserCovariates, UserId};
use crate::models::OutcomeModel;
use crate::sim::Arm;
use crate::stats::{ols_hc2, two_sided_p};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub group: String,
    pub estimate: f64,
    pub std_error: f64,
    pub p_value: f64,
    pub n_treated: usize,
    pub n_control: usize,
    /// The group (or one of the two groups of a difference row) had fewer
    /// than two users in an arm; numbers are NaN.
    pub empty: bool,
}

impl SubgroupRow {
    fn empty(group: String, n_t: usize, n_c: usize) -> SubgroupRow {
        SubgroupRow {
            group,
            estimate: f64::NAN,
            std_error: f64::NAN,
            p_value: f64::NAN,
            n_treated: n_t,
            n_control: n_c,
            empty: true,
        }
    }
}

type Pred = fn(&UserCovariates) -> bool;

fn group_row(
    outcomes: &BTreeMap<UserId, OutcomeVector>,
    arms: &BTreeMap<UserId, Arm>,
    covariates: &BTreeMap<UserId, UserCovariates>,
    outcome: Outcome,
    name: &str,
    keep: &dyn Fn(&UserCovariates) -> bool,
) -> SubgroupRow {
    let empty = UserCovariates::default();
    let s = Sample::filtered(outcomes, arms, outcome, name, |u| {
        keep(covariates.get(&u).unwrap_or(&empty))
    });
    let (t, c) = s.split();
    match diff_in_means(&s) {
        Ok(r) => SubgroupRow {
            group: name.into(),
            estimate: r.estimate,
            std_error: r.std_error,
            p_value: r.p_value,
            n_treated: t.len(),
            n_control: c.len(),
            empty: false,
        },
        Err(_) => SubgroupRow::empty(name.into(), t.len(), c.len()),
    }
}

fn diff_row(name: String, a: &SubgroupRow, b: &SubgroupRow) -> SubgroupRow {
    if a.empty || b.empty {
        return SubgroupRow::empty(name, a.n_treated + b.n_treated, a.n_control + b.n_control);
    }
    let est = a.estimate - b.estimate;
    let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
    SubgroupRow {
        group: name,
        estimate: est,
        std_error: se,
        p_value: two_sided_p(est, se),
        n_treated: a.n_treated + b.n_treated,
        n_control: a.n_control + b.n_control,
        empty: false,
    }
}

/// Difference-in-means by pre-period user type, with "diff" rows for each
/// complementary pair. Groups: everyone, niche, engagement, completion,
/// niche crossed with engagement, and past section usage.
pub fn subgroup_ates(
    outcomes: &BTreeMap<UserId, OutcomeVector>,
    arms: &BTreeMap<UserId, Arm>,
    covariates: &BTreeMap<UserId, UserCovariates>,
    outcome: Outcome,
) -> Vec<SubgroupRow> {
    let row = |name: &str, keep: &dyn Fn(&UserCovariates) -> bool| {
        group_row(outcomes, arms, covariates, outcome, name, keep)
    };
    let mut rows = vec![row("all", &|_| true)];
    let pairs: [(&str, &str, Pred); 4] = [
        ("niche", "non_niche", |c| c.is_niche),
        ("heavy_engagement", "light_engagement", |c| {
            c.is_heavy_engagement
        }),
        ("heavy_completion", "light_completion", |c| {
            c.is_heavy_completion
        }),
        ("new_section_users", "returning_section_users", |c| {
            !c.used_section_before
        }),
    ];
    for (yes, no, f) in pairs {
        let a = row(yes, &|c| f(c));
        let b = row(no, &|c| !f(c));
        let d = diff_row(format!("diff_{yes}_vs_{no}"), &a, &b);
        rows.extend([a, b, d]);
    }
    for (niche, nn) in [(true, "niche"), (false, "non_niche")] {
        for (heavy, hn) in [(true, "heavy"), (false, "light")] {
            let name = format!("{nn}_x_{hn}_engagement");
            rows.push(row(&name, &|c| {
                c.is_niche == niche && c.is_heavy_engagement == heavy
            }));
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreTerm {
    PastEngagement,
    PastCompletions,
    HeavyEngagement,
    HeavyCompletion,
    Niche,
    NicheXHeavyEngagement,
    NicheXHeavyCompletion,
}

impl ScoreTerm {
    pub const ALL: [ScoreTerm; 7] = [
        ScoreTerm::PastEngagement,
        ScoreTerm::PastCompletions,
        ScoreTerm::HeavyEngagement,
        ScoreTerm::HeavyCompletion,
        ScoreTerm::Niche,
        ScoreTerm::NicheXHeavyEngagement,
        ScoreTerm::NicheXHeavyCompletion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreTerm::PastEngagement => "past_engagement",
            ScoreTerm::PastCompletions => "past_completions",
            ScoreTerm::HeavyEngagement => "heavy_engagement",
            ScoreTerm::HeavyCompletion => "heavy_completion",
            ScoreTerm::Niche => "niche",
            ScoreTerm::NicheXHeavyEngagement => "niche_x_heavy_engagement",
            ScoreTerm::NicheXHeavyCompletion => "niche_x_heavy_completion",
        }
    }

    fn value(self, c: &UserCovariates) -> f64 {
        let b = |x: bool| x as u8 as f64;
        match self {
            ScoreTerm::PastEngagement => c.past_total_engagement,
            ScoreTerm::PastCompletions => c.past_stories_completed as f64,
            ScoreTerm::HeavyEngagement => b(c.is_heavy_engagement),
            ScoreTerm::HeavyCompletion => b(c.is_heavy_completion),
            ScoreTerm::Niche => b(c.is_niche),
            ScoreTerm::NicheXHeavyEngagement => b(c.is_niche && c.is_heavy_engagement),
            ScoreTerm::NicheXHeavyCompletion => b(c.is_niche && c.is_heavy_completion),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefRow {
    pub term: String,
    pub coef: f64,
    pub std_error: f64,
    pub p_value: f64,
}

/// OLS of per-user AIPW scores on an intercept and `terms`, HC2 errors.
pub fn aipw_score_regression(
    scores: &[f64],
    users: &[UserId],
    covariates: &BTreeMap<UserId, UserCovariates>,
    terms: &[ScoreTerm],
) -> Result<Vec<CoefRow>, AnalysisError> {
    assert_eq!(scores.len(), users.len());
    let empty = UserCovariates::default();
    let x = DMatrix::from_fn(users.len(), terms.len() + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            terms[j - 1].value(covariates.get(&users[i]).unwrap_or(&empty))
        }
    });
    let fit = ols_hc2(&x, scores)?;
    let names = std::iter::once("intercept").chain(terms.iter().map(|t| t.name()));
    Ok(names
        .enumerate()
        .map(|(j, n)| CoefRow {
            term: n.into(),
            coef: fit.coef[j],
            std_error: fit.se[j],
            p_value: fit.p_value(j),
        })
        .collect())
}

/// Slope, HC2 error and uncentered R² of `observed` on `predicted` without
/// an intercept.
pub fn no_intercept_fit(
    predicted: &[f64],
    observed: &[f64],
) -> Result<(f64, f64, f64), AnalysisError> {
    let x = DMatrix::from_column_slice(predicted.len(), 1, predicted);
    let fit = ols_hc2(&x, observed)?;
    Ok((fit.coef[0], fit.se[0], fit.r2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub arm: String,
    pub group: String,
    pub slope: f64,
    pub std_error: f64,
    pub p_value: f64,
    pub r2: f64,
    pub n: usize,
}

/// Regress observed engagement on model predictions over scored `section`
/// records, by arm and by heavy/light engagement group. Groups with no
/// records or a zero design get NaN entries.
pub fn calibration_regression(
    model: &OutcomeModel,
    data: &LogDataset,
    arms: &BTreeMap<UserId, Arm>,
    covariates: &BTreeMap<UserId, UserCovariates>,
    section: &Section,
) -> Vec<CalibrationRow> {
    let mut cells: BTreeMap<(Arm, &str), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in data.records().iter().filter(|r| &r.section == section) {
        let (Some(y), Some(arm)) = (r.value(), arms.get(&r.user_id)) else {
            continue;
        };
        let heavy = covariates
            .get(&r.user_id)
            .is_some_and(|c| c.is_heavy_engagement);
        let p = model.predict(r.user_id, r.story_id).value;
        for g in ["all", if heavy { "heavy" } else { "light" }] {
            let e = cells.entry((*arm, g)).or_default();
            e.0.push(p);
            e.1.push(y);
        }
    }
    let mut out = Vec::new();
    for arm in [Arm::Control, Arm::Treatment] {
        for g in ["all", "heavy", "light"] {
            let (p, y) = cells.remove(&(arm, g)).unwrap_or_default();
            let n = p.len();
            let row = match no_intercept_fit(&p, &y) {
                Ok((b, se, r2)) if n > 0 => CalibrationRow {
                    arm: arm.as_str().into(),
                    group: g.into(),
                    slope: b,
                    std_error: se,
                    p_value: two_sided_p(b, se),
                    r2,
                    n,
                },
                _ => CalibrationRow {
                    arm: arm.as_str().into(),
                    group: g.into(),
                    slope: f64::NAN,
                    std_error: f64::NAN,
                    p_value: f64::NAN,
                    r2: f64::NAN,
                    n,
                },
            };
            out.push(row);
        }
    }
    out
}
