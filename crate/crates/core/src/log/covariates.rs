//! Per-user covariates computed from history before a cutoff day.

use super::{LogDataset, OutcomeKind, Section, StoryId, UserId};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};

#[derive(Debug, Clone, PartialEq)]
pub struct CovariateConfig {
    pub cutoff_day: i32,
    /// Share of stories (by pre-cutoff completions) counted as popular.
    pub niche_story_quantile: f64,
    /// A user is niche when their popular-story share is below this.
    pub niche_user_share: f64,
    /// Share of users (by pre-cutoff totals) flagged heavy.
    pub heavy_quantile: f64,
    pub section: Section,
    pub recent_window_days: i32,
}

impl CovariateConfig {
    pub fn new(cutoff_day: i32) -> Self {
        CovariateConfig {
            cutoff_day,
            niche_story_quantile: 0.25,
            niche_user_share: 0.5,
            heavy_quantile: 0.5,
            section: Section::Recommended,
            recent_window_days: 14,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UserCovariates {
    pub past_total_engagement: f64,
    pub past_stories_completed: u32,
    /// Past interactions (any non-NotShown record) before the cutoff.
    pub past_interactions: u32,
    pub max_streak: u32,
    pub is_niche: bool,
    pub is_heavy_engagement: bool,
    pub is_heavy_completion: bool,
    pub used_section_before: bool,
    /// No records before the cutoff; every other field is zero/false.
    pub empty_history: bool,
}

/// Indices of the top `q` share of `items` ranked descending by key, ties by
/// ascending id: rank <= ceil(q * N).
pub(crate) fn top_share<K: Ord + Copy>(items: &[(K, f64)], q: f64) -> BTreeSet<K> {
    let mut v = items.to_vec();
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let n = (q * v.len() as f64).ceil() as usize;
    v.into_iter().take(n).map(|(k, _)| k).collect()
}

/// Covariates for every registered user. Only records with
/// `day < cutoff_day` are read.
pub fn compute_covariates(
    data: &LogDataset,
    cfg: &CovariateConfig,
) -> BTreeMap<UserId, UserCovariates> {
    let past: Vec<_> = data
        .records()
        .iter()
        .filter(|r| r.day < cfg.cutoff_day)
        .collect();

    let mut story_completions: BTreeMap<StoryId, f64> = BTreeMap::new();
    for r in &past {
        let e = story_completions.entry(r.story_id).or_insert(0.0);
        if r.outcome == OutcomeKind::Completed {
            *e += 1.0;
        }
    }
    let popular = top_share(
        &story_completions.into_iter().collect::<Vec<_>>(),
        cfg.niche_story_quantile,
    );

    let mut out: BTreeMap<UserId, UserCovariates> = data
        .users
        .keys()
        .map(|u| {
            (
                *u,
                UserCovariates {
                    empty_history: true,
                    ..Default::default()
                },
            )
        })
        .collect();
    let mut engaged: HashMap<UserId, (u32, u32)> = HashMap::new();
    let mut completion_days: HashMap<UserId, BTreeSet<i32>> = HashMap::new();
    let window_start = cfg.cutoff_day - cfg.recent_window_days;
    for r in &past {
        let c = out.entry(r.user_id).or_default();
        c.empty_history = false;
        if let Some(v) = r.value() {
            c.past_total_engagement += v;
            c.past_interactions += 1;
        }
        if r.outcome == OutcomeKind::Completed {
            c.past_stories_completed += 1;
            completion_days.entry(r.user_id).or_default().insert(r.day);
        }
        if r.outcome.is_engaged() {
            let e = engaged.entry(r.user_id).or_insert((0, 0));
            e.1 += 1;
            if popular.contains(&r.story_id) {
                e.0 += 1;
            }
        }
        if r.section == cfg.section && r.outcome.is_interaction() && r.day >= window_start {
            c.used_section_before = true;
        }
    }
    for (u, (pop, total)) in engaged {
        if total > 0 {
            out.get_mut(&u).unwrap().is_niche = (pop as f64 / total as f64) < cfg.niche_user_share;
        }
    }
    for (u, days) in completion_days {
        let mut best = 0;
        let mut run = 0;
        let mut prev: Option<i32> = None;
        for d in days {
            run = if prev == Some(d - 1) { run + 1 } else { 1 };
            best = best.max(run);
            prev = Some(d);
        }
        out.get_mut(&u).unwrap().max_streak = best;
    }
    let eng: Vec<(UserId, f64)> = out
        .iter()
        .map(|(u, c)| (*u, c.past_total_engagement))
        .collect();
    let comp: Vec<(UserId, f64)> = out
        .iter()
        .map(|(u, c)| (*u, c.past_stories_completed as f64))
        .collect();
    let heavy_e = top_share(&eng, cfg.heavy_quantile);
    let heavy_c = top_share(&comp, cfg.heavy_quantile);
    for (u, c) in out.iter_mut() {
        if c.empty_history {
            continue;
        }
        c.is_heavy_engagement = heavy_e.contains(u);
        c.is_heavy_completion = heavy_c.contains(u);
    }
    out
}
