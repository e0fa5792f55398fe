//! On-policy analysis of a two-arm experiment.

mod diagnostics;
mod estimators;
mod hetero;
mod wilcoxon;

pub use diagnostics::{
    balance_table, bucket_engagement_analysis, dominance_statistic, impression_buckets, mde,
    mean_engagement_by_rank, session_length_distribution, story_popularity_exposure, BalanceRow,
    BucketRow, PopularityRow, RankMean, SessionHistogram,
};
pub use estimators::{
    aipw_ate, aipw_scores, diff_in_means, regression_adjusted_ate, AipwConfig, AipwResult,
};
pub use hetero::{
    aipw_score_regression, calibration_regression, no_intercept_fit, subgroup_ates, CalibrationRow,
    CoefRow, ScoreTerm, SubgroupRow,
};
pub use wilcoxon::{wilcoxon_exact, wilcoxon_normal, wilcoxon_one_sided, WilcoxonResult};

use crate::log::{Channel, LogDataset, OutcomeKind, Section, UserCovariates, UserId, UserProfile};
use crate::sim::Arm;
use crate::stats::StatsError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("arm '{arm}' has {n} units; need at least 2")]
    DegenerateArm { arm: &'static str, n: usize },
    #[error("propensity {0} outside (0, 1)")]
    PropensityOutOfRange(f64),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Per-user sums over the analysis window.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OutcomeVector {
    pub total_engagement_section: f64,
    pub total_engagement_all: f64,
    pub total_stories_section: f64,
    pub total_stories_all: f64,
    pub reading_time_section: f64,
    pub reading_time_all: f64,
    pub launched_app: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    EngagementSection,
    StoriesSection,
    ReadingSection,
    EngagementAll,
    StoriesAll,
    ReadingAll,
}

impl Outcome {
    pub const ALL: [Outcome; 6] = [
        Outcome::EngagementSection,
        Outcome::StoriesSection,
        Outcome::ReadingSection,
        Outcome::EngagementAll,
        Outcome::StoriesAll,
        Outcome::ReadingAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Outcome::EngagementSection => "total_engagement_section",
            Outcome::StoriesSection => "total_stories_section",
            Outcome::ReadingSection => "reading_time_section",
            Outcome::EngagementAll => "total_engagement_all",
            Outcome::StoriesAll => "total_stories_all",
            Outcome::ReadingAll => "reading_time_all",
        }
    }

    pub fn get(self, v: &OutcomeVector) -> f64 {
        match self {
            Outcome::EngagementSection => v.total_engagement_section,
            Outcome::StoriesSection => v.total_stories_section,
            Outcome::ReadingSection => v.reading_time_section,
            Outcome::EngagementAll => v.total_engagement_all,
            Outcome::StoriesAll => v.total_stories_all,
            Outcome::ReadingAll => v.reading_time_all,
        }
    }
}

/// Outcome vectors for every user in `arms`. Stories count completions and
/// reading time sums the midpoints of completed stories.
pub fn build_outcomes(
    data: &LogDataset,
    arms: &BTreeMap<UserId, Arm>,
    section: &Section,
) -> BTreeMap<UserId, OutcomeVector> {
    let mut out: BTreeMap<UserId, OutcomeVector> = arms
        .keys()
        .map(|u| (*u, OutcomeVector::default()))
        .collect();
    for r in data.records() {
        let Some(v) = out.get_mut(&r.user_id) else {
            continue;
        };
        v.launched_app = true;
        let Some(y) = r.value() else { continue };
        let in_section = &r.section == section;
        let done = r.outcome == OutcomeKind::Completed;
        let minutes = if done {
            data.stories
                .get(&r.story_id)
                .map_or(0.0, |s| s.reading_time_midpoint())
        } else {
            0.0
        };
        v.total_engagement_all += y;
        v.total_stories_all += done as u8 as f64;
        v.reading_time_all += minutes;
        if in_section {
            v.total_engagement_section += y;
            v.total_stories_section += done as u8 as f64;
            v.reading_time_section += minutes;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    DiffInMeans,
    RegressionAdjusted,
    Aipw,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::DiffInMeans => "diff_in_means",
            Estimator::RegressionAdjusted => "regression_adjusted",
            Estimator::Aipw => "aipw",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: Estimator,
    pub outcome: String,
    pub filter: String,
    pub estimate: f64,
    pub std_error: f64,
    pub p_value: f64,
    pub pct_of_baseline: f64,
    pub n_treated: usize,
    pub n_control: usize,
}

impl EstimateReport {
    pub const HEADER: &'static str = "estimator,outcome,filter,estimate,se,p,pct";

    pub fn ci95(&self) -> (f64, f64) {
        let z = crate::stats::normal_quantile(0.975);
        (
            self.estimate - z * self.std_error,
            self.estimate + z * self.std_error,
        )
    }

    pub fn covers(&self, value: f64) -> bool {
        let (lo, hi) = self.ci95();
        lo <= value && value <= hi
    }
}

impl fmt::Display for EstimateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{:.6},{:.6},{:.6},{:.3}",
            self.estimator.name(),
            self.outcome,
            self.filter,
            self.estimate,
            self.std_error,
            self.p_value,
            self.pct_of_baseline
        )
    }
}

/// The analysis sample for one outcome: users who launched the app.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub outcome: String,
    pub filter: String,
    pub users: Vec<UserId>,
    pub y: Vec<f64>,
    pub treated: Vec<bool>,
}

impl Sample {
    pub fn new(
        outcomes: &BTreeMap<UserId, OutcomeVector>,
        arms: &BTreeMap<UserId, Arm>,
        outcome: Outcome,
    ) -> Sample {
        Self::filtered(outcomes, arms, outcome, "all", |_| true)
    }

    pub fn filtered<F: Fn(UserId) -> bool>(
        outcomes: &BTreeMap<UserId, OutcomeVector>,
        arms: &BTreeMap<UserId, Arm>,
        outcome: Outcome,
        filter: &str,
        keep: F,
    ) -> Sample {
        let mut s = Sample {
            outcome: outcome.name().into(),
            filter: filter.into(),
            users: Vec::new(),
            y: Vec::new(),
            treated: Vec::new(),
        };
        for (u, v) in outcomes {
            if !v.launched_app || !keep(*u) {
                continue;
            }
            if let Some(a) = arms.get(u) {
                s.users.push(*u);
                s.y.push(outcome.get(v));
                s.treated.push(a.is_treated());
            }
        }
        s
    }

    /// A sample built directly from values, for callers outside the
    /// experiment pipeline.
    pub fn from_values(y: Vec<f64>, treated: Vec<bool>) -> Sample {
        assert_eq!(y.len(), treated.len());
        Sample {
            outcome: "y".into(),
            filter: "all".into(),
            users: (0..y.len() as u32).map(UserId).collect(),
            y,
            treated,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let mut t = Vec::new();
        let mut c = Vec::new();
        for (y, a) in self.y.iter().zip(&self.treated) {
            if *a {
                t.push(*y)
            } else {
                c.push(*y)
            }
        }
        (t, c)
    }
}

/// Covariates used for adjustment: grade and channel dummies (first level
/// dropped), past engagement, niche type and past section usage.
pub fn covariate_row(
    profile: &UserProfile,
    cov: &UserCovariates,
    grades: &[u8],
) -> (Vec<f64>, Vec<String>) {
    let mut x = Vec::new();
    let mut names = Vec::new();
    for g in grades.iter().skip(1) {
        x.push((profile.grade == *g) as u8 as f64);
        names.push(format!("grade_{g}"));
    }
    for c in Channel::ALL.iter().skip(1) {
        x.push((profile.channel == *c) as u8 as f64);
        names.push(format!("channel_{}", c.as_str()));
    }
    x.push(cov.past_total_engagement);
    names.push("past_engagement".into());
    x.push(cov.is_niche as u8 as f64);
    names.push("niche".into());
    x.push(cov.used_section_before as u8 as f64);
    names.push("used_section_before".into());
    (x, names)
}

/// Covariate rows for `users`, with columns that are constant across the
/// sample removed.
pub fn covariate_matrix(
    users: &[UserId],
    profiles: &BTreeMap<UserId, UserProfile>,
    covariates: &BTreeMap<UserId, UserCovariates>,
) -> (Vec<Vec<f64>>, Vec<String>) {
    let mut grades: Vec<u8> = users.iter().map(|u| profiles[u].grade).collect();
    grades.sort_unstable();
    grades.dedup();
    let empty = UserCovariates::default();
    let mut rows = Vec::with_capacity(users.len());
    let mut names = Vec::new();
    for u in users {
        let (x, n) = covariate_row(&profiles[u], covariates.get(u).unwrap_or(&empty), &grades);
        rows.push(x);
        names = n;
    }
    let keep: Vec<usize> = (0..names.len())
        .filter(|&j| rows.iter().any(|r| r[j] != rows[0][j]))
        .collect();
    let rows = rows
        .into_iter()
        .map(|r| keep.iter().map(|&j| r[j]).collect())
        .collect();
    (rows, keep.iter().map(|&j| names[j].clone()).collect())
}

pub(crate) fn pct_of(estimate: f64, baseline: f64) -> f64 {
    if baseline != 0.0 {
        estimate / baseline * 100.0
    } else {
        f64::NAN
    }
}
