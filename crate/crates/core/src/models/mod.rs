//! Engagement-prediction models.
//!
//! All three model kinds share one parameter layout and differ in which
//! blocks are active:
//!
//! | kind | logit |
//! |------|-------|
//! | mean | `b0` |
//! | two-way fixed effects | `b0 + user_bias[i] + story_bias[j]` |
//! | matrix factorization | `b0 + user_bias[i] + story_bias[j] + <user_factors[i], story_factors[j]>` |
//!
//! Predictions are `sigmoid(logit)` and always lie strictly inside (0, 1).

mod eval;
mod io;
mod train;

pub use eval::{eligibility, evaluate_mse, threshold_grid, HistoryFilter, ThresholdGrid};
pub use io::{load_model, read_model, save_model, write_model, FORMAT_VERSION};
pub use train::{
    fit, gradient, record_loss, scored_examples, train, Example, FitResult, RecordGradient,
    SplitMode, SplitSpec, TrainConfig, TuningReport, TuningRow,
};

use crate::log::{StoryId, UserId};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training loss became non-finite (epoch {epoch}); lower the learning rate")]
    NonFiniteLoss { epoch: usize },
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("no scorable (non-NA) records")]
    NoScorableRecords,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model file version mismatch: {0}")]
    VersionMismatch(String),
    #[error("corrupt model file: {0}")]
    CorruptFile(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Logits are clamped here before the sigmoid so predictions stay inside (0, 1).
pub const LOGIT_CLAMP: f64 = 30.0;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "mean")]
    Mean,
    #[serde(rename = "twfe")]
    TwoWayFixedEffects,
    #[serde(rename = "mf")]
    MatrixFactorization,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Mean => "mean",
            ModelKind::TwoWayFixedEffects => "twfe",
            ModelKind::MatrixFactorization => "mf",
        }
    }

    pub fn parse(s: &str) -> Option<ModelKind> {
        match s {
            "mean" => Some(ModelKind::Mean),
            "twfe" => Some(ModelKind::TwoWayFixedEffects),
            "mf" | "pytf" => Some(ModelKind::MatrixFactorization),
            _ => None,
        }
    }

    pub(crate) fn has_effects(self) -> bool {
        self != ModelKind::Mean
    }

    pub(crate) fn has_factors(self) -> bool {
        self == ModelKind::MatrixFactorization
    }
}

/// A prediction and whether the cold-start fallback was used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub value: f64,
    pub cold_start: bool,
}

/// A fitted engagement model.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeModel {
    pub kind: ModelKind,
    pub k: usize,
    pub l2: f64,
    pub seed: u64,
    /// Hex digest of the training data.
    pub fingerprint: String,
    pub beta0: f64,
    users: Vec<UserId>,
    stories: Vec<StoryId>,
    user_index: HashMap<UserId, usize>,
    story_index: HashMap<StoryId, usize>,
    pub(crate) user_bias: Vec<f64>,
    pub(crate) story_bias: Vec<f64>,
    pub(crate) user_factors: Vec<f64>,
    pub(crate) story_factors: Vec<f64>,
}

impl OutcomeModel {
    /// All-zero model over the given entities (k forced to 0 unless MF).
    pub fn zeros(
        kind: ModelKind,
        k: usize,
        users: Vec<UserId>,
        stories: Vec<StoryId>,
    ) -> OutcomeModel {
        let k = if kind.has_factors() { k } else { 0 };
        let mut users = users;
        users.sort();
        users.dedup();
        let mut stories = stories;
        stories.sort();
        stories.dedup();
        let user_index = users.iter().enumerate().map(|(i, u)| (*u, i)).collect();
        let story_index = stories.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        OutcomeModel {
            kind,
            k,
            l2: 0.0,
            seed: 0,
            fingerprint: String::new(),
            beta0: 0.0,
            user_bias: vec![0.0; users.len()],
            story_bias: vec![0.0; stories.len()],
            user_factors: vec![0.0; users.len() * k],
            story_factors: vec![0.0; stories.len() * k],
            users,
            stories,
            user_index,
            story_index,
        }
    }

    pub fn users(&self) -> &[UserId] {
        &self.users
    }

    pub fn stories(&self) -> &[StoryId] {
        &self.stories
    }

    pub fn user_idx(&self, u: UserId) -> Option<usize> {
        self.user_index.get(&u).copied()
    }

    pub fn story_idx(&self, s: StoryId) -> Option<usize> {
        self.story_index.get(&s).copied()
    }

    pub fn user_effect(&self, u: UserId) -> Option<f64> {
        self.user_idx(u).map(|i| self.user_bias[i])
    }

    pub fn story_effect(&self, s: StoryId) -> Option<f64> {
        self.story_idx(s).map(|j| self.story_bias[j])
    }

    pub fn user_vector(&self, u: UserId) -> Option<&[f64]> {
        self.user_idx(u)
            .map(|i| &self.user_factors[i * self.k..(i + 1) * self.k])
    }

    pub fn story_vector(&self, s: StoryId) -> Option<&[f64]> {
        self.story_idx(s)
            .map(|j| &self.story_factors[j * self.k..(j + 1) * self.k])
    }

    pub fn set_user(&mut self, u: UserId, bias: f64, factors: &[f64]) {
        let i = self.user_idx(u).expect("known user");
        self.user_bias[i] = bias;
        self.user_factors[i * self.k..(i + 1) * self.k].copy_from_slice(factors);
    }

    pub fn set_story(&mut self, s: StoryId, bias: f64, factors: &[f64]) {
        let j = self.story_idx(s).expect("known story");
        self.story_bias[j] = bias;
        self.story_factors[j * self.k..(j + 1) * self.k].copy_from_slice(factors);
    }

    /// Logit for indexed entities.
    pub(crate) fn logit_idx(&self, ui: usize, si: usize) -> f64 {
        let mut s = self.beta0;
        if self.kind.has_effects() {
            s += self.user_bias[ui] + self.story_bias[si];
        }
        if self.kind.has_factors() {
            let k = self.k;
            let a = &self.user_factors[ui * k..(ui + 1) * k];
            let b = &self.story_factors[si * k..(si + 1) * k];
            s += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        }
        s
    }

    /// Logit with the cold-start fallback: unknown entities contribute no
    /// terms and latents are used only when both sides are known.
    pub fn logit(&self, user: UserId, story: StoryId) -> (f64, bool) {
        match (self.user_idx(user), self.story_idx(story)) {
            (Some(ui), Some(si)) => (self.logit_idx(ui, si), false),
            (ui, si) => {
                let mut s = self.beta0;
                if self.kind.has_effects() {
                    s += ui.map_or(0.0, |i| self.user_bias[i])
                        + si.map_or(0.0, |j| self.story_bias[j]);
                }
                (s, self.kind != ModelKind::Mean)
            }
        }
    }

    pub fn predict(&self, user: UserId, story: StoryId) -> Prediction {
        let (s, cold_start) = self.logit(user, story);
        Prediction {
            value: sigmoid(s.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)),
            cold_start,
        }
    }

    pub fn predict_value(&self, user: UserId, story: StoryId) -> f64 {
        self.predict(user, story).value
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn mf_with(beta0: f64, ub: f64, sb: f64, uf: &[f64], sf: &[f64]) -> OutcomeModel {
        let mut m = OutcomeModel::zeros(
            ModelKind::MatrixFactorization,
            uf.len(),
            vec![UserId(1)],
            vec![StoryId(2)],
        );
        m.beta0 = beta0;
        m.set_user(UserId(1), ub, uf);
        m.set_story(StoryId(2), sb, sf);
        m
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(30.0) > 1.0 - 1e-12);
        assert!(sigmoid(30.0) < 1.0);
    }

    #[test]
    fn zero_mf_predicts_half() {
        let m = mf_with(0.0, 0.0, 0.0, &[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(m.predict_value(UserId(1), StoryId(2)), 0.5);
    }

    #[test]
    fn hand_evaluated_mf() {
        // 0 + 1 + 1 + (1*2 + 0*3) = 4
        let m = mf_with(0.0, 1.0, 1.0, &[1.0, 0.0], &[2.0, 3.0]);
        assert_relative_eq!(
            m.predict_value(UserId(1), StoryId(2)),
            0.9820137900379085,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            m.predict_value(UserId(1), StoryId(2)),
            sigmoid(4.0),
            epsilon = 0.0
        );
    }

    #[test]
    fn cold_start_uses_additive_terms() {
        let m = mf_with(0.5, 1.0, -2.0, &[3.0], &[3.0]);
        let p = m.predict(UserId(9), StoryId(2));
        assert!(p.cold_start);
        assert_relative_eq!(p.value, sigmoid(0.5 - 2.0));
        let q = m.predict(UserId(1), StoryId(7));
        assert_relative_eq!(q.value, sigmoid(1.5));
    }

    #[test]
    fn extreme_logits_stay_inside_unit_interval() {
        let m = mf_with(500.0, 0.0, 0.0, &[0.0], &[0.0]);
        let v = m.predict_value(UserId(1), StoryId(2));
        assert!(v < 1.0 && v > 0.0);
    }

    proptest! {
        #[test]
        fn sigmoid_symmetry(x in -40.0f64..40.0) {
            prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn zero_latents_reduce_to_twfe(b0 in -3.0f64..3.0, ub in -2.0f64..2.0, sb in -2.0f64..2.0, k in 1usize..6) {
            let mf = mf_with(b0, ub, sb, &vec![0.0; k], &vec![0.0; k]);
            let mut twfe = OutcomeModel::zeros(ModelKind::TwoWayFixedEffects, 0, vec![UserId(1)], vec![StoryId(2)]);
            twfe.beta0 = b0;
            twfe.set_user(UserId(1), ub, &[]);
            twfe.set_story(StoryId(2), sb, &[]);
            prop_assert_eq!(mf.predict_value(UserId(1), StoryId(2)), twfe.predict_value(UserId(1), StoryId(2)));
        }
    }
}
