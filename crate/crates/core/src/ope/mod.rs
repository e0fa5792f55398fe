//! Off-policy evaluation: position effects, propensity models, a
//! cross-fitted outcome regressor and the doubly-robust policy value with a
//! user-clustered bootstrap.

mod dr;
mod position;
mod propensity;
mod regressor;

pub use dr::{
    bootstrap_se, compare_policies, dr_value, onpolicy_vs_offpolicy_check, write_comparisons,
    CheckReport, ComparisonRow, DrConfig, DrEstimate, EstimateScale, ScaledEstimate,
};
pub use position::{estimate_position_effects, PositionEffects};
pub use propensity::{
    editorial_propensity, target_slates, topk_propensity, write_propensities, PropensityKind,
    PropensityModel, DEFAULT_FLOOR,
};
pub use regressor::{fit_outcome_regressor, OutcomePredictor, OutcomeRegressor, RegressorConfig};

use crate::log::{LogDataset, Section, StoryId, UserId};
use crate::models::ModelError;
use crate::policy::PolicyError;
use crate::stats::StatsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OpeError {
    #[error("{fraction:.3} of logs have a logging propensity at the floor (limit {limit})")]
    CoverageViolation { fraction: f64, limit: f64 },
    #[error("cannot compare a {0} estimate with a {1} estimate")]
    ScaleMismatch(&'static str, &'static str),
    #[error("no logged interactions to evaluate")]
    NoLogs,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// One scored interaction under the logging policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoggedInteraction {
    pub user: UserId,
    pub grade: u8,
    pub story: StoryId,
    pub y: f64,
}

/// Scored `section` interactions of registered users, in log order.
pub fn logged_interactions(data: &LogDataset, section: &Section) -> Vec<LoggedInteraction> {
    data.records()
        .iter()
        .filter(|r| &r.section == section)
        .filter_map(|r| {
            let y = r.value()?;
            let grade = data.users.get(&r.user_id)?.grade;
            Some(LoggedInteraction {
                user: r.user_id,
                grade,
                story: r.story_id,
                y,
            })
        })
        .collect()
}
