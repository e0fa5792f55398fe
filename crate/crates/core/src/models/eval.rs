//! Held-out error, history-threshold filters and eligibility.

use super::train::{mse_examples, scored_examples, train, Example, SplitSpec, TrainConfig};
use super::{ModelError, ModelKind, OutcomeModel};
use crate::log::{LogDataset, StoryId, UserId};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};

/// Mean squared error over every non-NA record.
pub fn evaluate_mse(model: &OutcomeModel, data: &LogDataset) -> Result<f64, ModelError> {
    let ex = scored_examples(data, true);
    if ex.is_empty() {
        return Err(ModelError::NoScorableRecords);
    }
    Ok(mse_examples(model, &ex))
}

/// Minimum interaction counts for users and stories, both computed on the
/// dataset being filtered (one pass).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HistoryFilter {
    pub min_user_interactions: usize,
    pub min_story_interactions: usize,
}

impl HistoryFilter {
    pub fn apply(&self, data: &LogDataset) -> LogDataset {
        let (u, s) = data.interaction_counts();
        data.filter(|r| {
            u.get(&r.user_id).copied().unwrap_or(0) >= self.min_user_interactions
                && s.get(&r.story_id).copied().unwrap_or(0) >= self.min_story_interactions
        })
    }
}

/// Users and stories with at least `min_interactions` interactions, each
/// counted independently on the raw dataset. NotShown rows do not count.
pub fn eligibility(
    data: &LogDataset,
    min_interactions: usize,
) -> (BTreeSet<UserId>, BTreeSet<StoryId>) {
    let (u, s) = data.interaction_counts();
    let users = data
        .users
        .keys()
        .filter(|k| u.get(k).copied().unwrap_or(0) >= min_interactions)
        .copied()
        .collect();
    let stories = data
        .stories
        .keys()
        .filter(|k| s.get(k).copied().unwrap_or(0) >= min_interactions)
        .copied()
        .collect();
    (users, stories)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub user_thresholds: Vec<usize>,
    pub story_thresholds: Vec<usize>,
    /// `cells[a][b]` is the test MSE for users with at least
    /// `user_thresholds[a]` and stories with at least `story_thresholds[b]`
    /// interactions; `None` when that test subset is empty.
    pub cells: Vec<Vec<Option<f64>>>,
    pub counts: Vec<Vec<usize>>,
}

impl ThresholdGrid {
    pub fn empty_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, row) in self.cells.iter().enumerate() {
            for (b, c) in row.iter().enumerate() {
                if c.is_none() {
                    out.push((self.user_thresholds[a], self.story_thresholds[b]));
                }
            }
        }
        out
    }
}

pub(crate) fn grid_cells(
    model: &OutcomeModel,
    test: &[Example],
    user_counts: &HashMap<UserId, usize>,
    story_counts: &HashMap<StoryId, usize>,
    user_thresholds: &[usize],
    story_thresholds: &[usize],
) -> ThresholdGrid {
    let mut cells = Vec::new();
    let mut counts = Vec::new();
    for &ut in user_thresholds {
        let mut row = Vec::new();
        let mut crow = Vec::new();
        for &st in story_thresholds {
            let subset: Vec<Example> = test
                .iter()
                .filter(|e| {
                    user_counts.get(&e.user).copied().unwrap_or(0) >= ut
                        && story_counts.get(&e.story).copied().unwrap_or(0) >= st
                })
                .copied()
                .collect();
            crow.push(subset.len());
            row.push(if subset.is_empty() {
                None
            } else {
                Some(mse_examples(model, &subset))
            });
        }
        cells.push(row);
        counts.push(crow);
    }
    ThresholdGrid {
        user_thresholds: user_thresholds.to_vec(),
        story_thresholds: story_thresholds.to_vec(),
        cells,
        counts,
    }
}

/// Train once on the loosest filter and score the held-out test split on
/// every (user, story) threshold cell. Counts come from the unfiltered data.
pub fn threshold_grid(
    kind: ModelKind,
    data: &LogDataset,
    user_thresholds: &[usize],
    story_thresholds: &[usize],
    cfg: &TrainConfig,
    split: &SplitSpec,
) -> Result<ThresholdGrid, ModelError> {
    let ascending = |v: &[usize]| !v.is_empty() && v.windows(2).all(|w| w[0] < w[1]);
    if !ascending(user_thresholds) || !ascending(story_thresholds) {
        return Err(ModelError::Config(
            "thresholds must be non-empty and strictly ascending".into(),
        ));
    }
    let loosest = HistoryFilter {
        min_user_interactions: user_thresholds[0],
        min_story_interactions: story_thresholds[0],
    };
    let base = loosest.apply(data);
    let (_, report) = train(kind, &base, cfg, split)?;
    let (_, _, test) = split.split(&scored_examples(&base, cfg.include_skipped))?;
    let (uc, sc) = data.interaction_counts();
    Ok(grid_cells(
        &report.holdout_model,
        &test,
        &uc,
        &sc,
        user_thresholds,
        story_thresholds,
    ))
}
