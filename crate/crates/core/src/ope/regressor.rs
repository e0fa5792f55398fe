use super::{LoggedInteraction, OpeError};
use crate::log::{Channel, StoryId, StoryMeta, UserCovariates, UserId, UserProfile};
use crate::models::{sigmoid, OutcomeModel};
use crate::seed;
use crate::stats::Ridge;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

/// Anything that predicts engagement for a (user, story) pair.
pub trait OutcomePredictor: Sync {
    fn predict(&self, user: UserId, story: StoryId) -> f64;
}

impl<F: Fn(UserId, StoryId) -> f64 + Sync> OutcomePredictor for F {
    fn predict(&self, user: UserId, story: StoryId) -> f64 {
        self(user, story)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorConfig {
    pub folds: usize,
    pub ridge_lambda: f64,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            folds: 5,
            ridge_lambda: 1e-4,
            seed: 0,
        }
    }
}

/// Ridge regression of engagement on learned user and story
/// representations, their elementwise product, the factor model's own
/// prediction, and observed user and story covariates. Fit with user-level
/// cross-fitting: a user's predictions come from the model that did not see
/// their logs.
#[derive(Debug, Clone)]
pub struct OutcomeRegressor {
    representations: Arc<OutcomeModel>,
    user_x: HashMap<UserId, Vec<f64>>,
    story_x: HashMap<StoryId, Vec<f64>>,
    n_user_x: usize,
    n_story_x: usize,
    fold_of: HashMap<UserId, usize>,
    folds: Vec<Ridge>,
    pooled: Ridge,
}

impl OutcomeRegressor {
    pub fn features(&self, user: UserId, story: StoryId) -> Vec<f64> {
        let m = &self.representations;
        let k = m.k;
        let zeros = vec![0.0; k];
        let theta = m.user_vector(user).unwrap_or(&zeros);
        let lambda = m.story_vector(story).unwrap_or(&zeros);
        let mut x = Vec::with_capacity(3 * k + 3 + self.n_user_x + self.n_story_x);
        x.extend_from_slice(theta);
        x.extend_from_slice(lambda);
        x.extend(theta.iter().zip(lambda).map(|(a, b)| a * b));
        x.push(m.user_effect(user).unwrap_or(0.0));
        x.push(m.story_effect(story).unwrap_or(0.0));
        x.push(sigmoid(m.logit(user, story).0));
        match self.user_x.get(&user) {
            Some(u) => x.extend_from_slice(u),
            None => x.extend(std::iter::repeat_n(0.0, self.n_user_x)),
        }
        match self.story_x.get(&story) {
            Some(s) => x.extend_from_slice(s),
            None => x.extend(std::iter::repeat_n(0.0, self.n_story_x)),
        }
        x
    }
}

impl OutcomePredictor for OutcomeRegressor {
    fn predict(&self, user: UserId, story: StoryId) -> f64 {
        let model = self
            .fold_of
            .get(&user)
            .map_or(&self.pooled, |f| &self.folds[*f]);
        model.predict(&self.features(user, story)).clamp(0.0, 1.0)
    }
}

fn user_covariates(
    profiles: &BTreeMap<UserId, UserProfile>,
    covariates: &BTreeMap<UserId, UserCovariates>,
) -> (HashMap<UserId, Vec<f64>>, usize) {
    let mut grades: Vec<u8> = profiles.values().map(|p| p.grade).collect();
    grades.sort_unstable();
    grades.dedup();
    let n = grades.len().saturating_sub(1) + Channel::ALL.len() - 1 + 1;
    let map = profiles
        .iter()
        .map(|(u, p)| {
            let mut x: Vec<f64> = grades
                .iter()
                .skip(1)
                .map(|g| (p.grade == *g) as u8 as f64)
                .collect();
            x.extend(
                Channel::ALL
                    .iter()
                    .skip(1)
                    .map(|c| (p.channel == *c) as u8 as f64),
            );
            x.push(covariates.get(u).map_or(0.0, |c| c.past_total_engagement));
            (*u, x)
        })
        .collect();
    (map, n)
}

fn story_covariates(stories: &BTreeMap<StoryId, StoryMeta>) -> (HashMap<StoryId, Vec<f64>>, usize) {
    let mut tags: Vec<&str> = stories
        .values()
        .map(|s| s.collection_tag.as_str())
        .collect();
    tags.sort_unstable();
    tags.dedup();
    let tags = &tags[tags.len().min(1)..];
    let map = stories
        .iter()
        .map(|(id, s)| {
            let mut x: Vec<f64> = tags
                .iter()
                .map(|t| (s.collection_tag == *t) as u8 as f64)
                .collect();
            x.push(s.reading_time_midpoint());
            (*id, x)
        })
        .collect();
    (map, tags.len() + 1)
}

pub fn fit_outcome_regressor(
    logs: &[LoggedInteraction],
    representations: Arc<OutcomeModel>,
    profiles: &BTreeMap<UserId, UserProfile>,
    stories: &BTreeMap<StoryId, StoryMeta>,
    covariates: &BTreeMap<UserId, UserCovariates>,
    cfg: &RegressorConfig,
) -> Result<OutcomeRegressor, OpeError> {
    if logs.is_empty() {
        return Err(OpeError::NoLogs);
    }
    let (user_x, n_user_x) = user_covariates(profiles, covariates);
    let (story_x, n_story_x) = story_covariates(stories);
    let mut reg = OutcomeRegressor {
        representations,
        user_x,
        story_x,
        n_user_x,
        n_story_x,
        fold_of: HashMap::new(),
        folds: Vec::new(),
        pooled: Ridge::zero(0),
    };
    let mut users: Vec<UserId> = logs.iter().map(|l| l.user).collect();
    users.sort();
    users.dedup();
    users.shuffle(&mut seed::rng(seed::derive(
        cfg.seed,
        &[seed::tag("regressor-folds")],
    )));
    let k = cfg.folds.clamp(1, users.len());
    reg.fold_of = users.iter().enumerate().map(|(i, u)| (*u, i % k)).collect();

    let rows: Vec<Vec<f64>> = logs.iter().map(|l| reg.features(l.user, l.story)).collect();
    let y: Vec<f64> = logs.iter().map(|l| l.y).collect();
    let fit = |keep: &dyn Fn(usize) -> bool| -> Result<Ridge, OpeError> {
        let idx: Vec<usize> = (0..logs.len()).filter(|&i| keep(i)).collect();
        let r: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].clone()).collect();
        let t: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        Ok(Ridge::fit(&r, &t, cfg.ridge_lambda)?)
    };
    reg.pooled = fit(&|_| true)?;
    if k > 1 {
        let fold_of = &reg.fold_of;
        reg.folds = crate::par::map_range(k, |f| fit(&|i| fold_of[&logs[i].user] != f))
            .into_iter()
            .collect::<Result<_, _>>()?;
    } else {
        reg.folds = vec![reg.pooled.clone()];
    }
    Ok(reg)
}
