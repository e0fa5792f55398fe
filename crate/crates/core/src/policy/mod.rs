//! Editorial, popularity and personalized rankings, the weekly slate and the
//! top-K exposure model.

mod io;
mod slate;

pub use io::{
    read_position_effects, read_script, write_position_effects, write_script, write_slates,
    SlateDumpRow,
};
pub use slate::{DayActivity, SlateState, TOP_BLOCK};

use crate::log::{StoryId, UserId};
use crate::models::OutcomeModel;
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

pub const DEFAULT_SLATE_SIZE: usize = 15;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("editorial script has no ranking for grade {grade}, week {week}")]
    ScriptGap { grade: u8, week: i32 },
    #[error("position effects sum to zero")]
    ZeroMass,
    #[error("position effects must be finite and non-negative")]
    InvalidPositionEffects,
    #[error("empty candidate set")]
    NoCandidates,
    #[error("malformed {what} at line {line}: {reason}")]
    Parse {
        what: &'static str,
        line: usize,
        reason: String,
    },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for PolicyError {
    fn from(e: std::io::Error) -> Self {
        PolicyError::Io(e.to_string())
    }
}

/// Week index of a day: days 0..=6 are week 0.
pub fn week_of(day: i32) -> i32 {
    day.div_euclid(7)
}

/// Editorial rankings per (grade, week).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EditorialScript {
    pub rankings: BTreeMap<(u8, i32), Vec<StoryId>>,
}

impl EditorialScript {
    pub fn ranking(&self, grade: u8, week: i32) -> Result<&[StoryId], PolicyError> {
        self.rankings
            .get(&(grade, week))
            .map(|v| v.as_slice())
            .ok_or(PolicyError::ScriptGap { grade, week })
    }

    /// Every (grade, week) pair in scope has a ranking.
    pub fn covers(
        &self,
        grades: impl IntoIterator<Item = u8>,
        weeks: std::ops::Range<i32>,
    ) -> Result<(), PolicyError> {
        for g in grades {
            for w in weeks.clone() {
                self.ranking(g, w)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum PolicyKind {
    Editorial(Arc<EditorialScript>),
    /// Ranks by a two-way fixed effects model: the order depends only on the
    /// story effects.
    Popularity(Arc<OutcomeModel>),
    Personalized(Arc<OutcomeModel>),
}

#[derive(Debug, Clone)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub slate_size: usize,
}

impl PolicySpec {
    pub fn editorial(script: Arc<EditorialScript>) -> Self {
        PolicySpec {
            kind: PolicyKind::Editorial(script),
            slate_size: DEFAULT_SLATE_SIZE,
        }
    }

    pub fn popularity(model: Arc<OutcomeModel>) -> Self {
        PolicySpec {
            kind: PolicyKind::Popularity(model),
            slate_size: DEFAULT_SLATE_SIZE,
        }
    }

    pub fn personalized(model: Arc<OutcomeModel>) -> Self {
        PolicySpec {
            kind: PolicyKind::Personalized(model),
            slate_size: DEFAULT_SLATE_SIZE,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            PolicyKind::Editorial(_) => "editorial",
            PolicyKind::Popularity(_) => "popularity",
            PolicyKind::Personalized(_) => "personalized",
        }
    }
}

/// Who a ranking is for. Grade and week matter only to the editorial script.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserContext {
    pub user: UserId,
    pub grade: u8,
    pub week: i32,
}

/// Full ranking of `candidates` under `policy`.
///
/// Model policies sort by predicted engagement, descending, ties by ascending
/// id. The editorial policy keeps the scripted order restricted to the
/// candidates and appends unscripted candidates by ascending id.
pub fn rank_stories(
    policy: &PolicySpec,
    ctx: UserContext,
    candidates: &[StoryId],
) -> Result<Vec<StoryId>, PolicyError> {
    if candidates.is_empty() {
        return Err(PolicyError::NoCandidates);
    }
    match &policy.kind {
        PolicyKind::Editorial(script) => {
            let order = script.ranking(ctx.grade, ctx.week)?;
            let pool: std::collections::HashSet<StoryId> = candidates.iter().copied().collect();
            let mut out: Vec<StoryId> = Vec::with_capacity(candidates.len());
            let mut seen = std::collections::HashSet::with_capacity(candidates.len());
            for s in order {
                if pool.contains(s) && seen.insert(*s) {
                    out.push(*s);
                }
            }
            let mut rest: Vec<StoryId> = pool.into_iter().filter(|s| !seen.contains(s)).collect();
            rest.sort();
            out.extend(rest);
            Ok(out)
        }
        PolicyKind::Popularity(m) | PolicyKind::Personalized(m) => {
            let mut scored: Vec<(StoryId, f64)> = candidates
                .iter()
                .map(|s| (*s, m.logit(ctx.user, *s).0))
                .collect();
            scored.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.0.cmp(&b.0))
            });
            scored.dedup_by_key(|x| x.0);
            Ok(scored.into_iter().map(|x| x.0).collect())
        }
    }
}

/// The first `k` entries of a ranking; `short` is set when fewer exist.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slate {
    pub stories: Vec<StoryId>,
    pub short: bool,
}

pub fn top_k(ranking: &[StoryId], k: usize) -> Slate {
    let k = k.max(1);
    Slate {
        stories: ranking.iter().take(k).copied().collect(),
        short: ranking.len() < k,
    }
}

/// Normalized position effects over the first `len` ranks.
pub fn normalized_exposure(position_effects: &[f64], len: usize) -> Result<Vec<f64>, PolicyError> {
    if position_effects.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(PolicyError::InvalidPositionEffects);
    }
    let used = &position_effects[..len.min(position_effects.len())];
    let total: f64 = used.iter().sum();
    if total <= 0.0 {
        return Err(PolicyError::ZeroMass);
    }
    Ok(used.iter().map(|p| p / total).collect())
}

/// Probability that a section interaction lands on each slate story:
/// `position_effects[r] / sum` for the story at rank r.
pub fn exposure_distribution(
    slate: &[StoryId],
    position_effects: &[f64],
) -> Result<BTreeMap<StoryId, f64>, PolicyError> {
    let w = normalized_exposure(position_effects, slate.len())?;
    let mut out = BTreeMap::new();
    for (s, p) in slate.iter().zip(w) {
        *out.entry(*s).or_insert(0.0) += p;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelKind;
    use proptest::prelude::*;

    fn ids(v: &[u32]) -> Vec<StoryId> {
        v.iter().map(|&x| StoryId(x)).collect()
    }

    fn ctx(u: u32) -> UserContext {
        UserContext {
            user: UserId(u),
            grade: 1,
            week: 0,
        }
    }

    #[test]
    fn equal_predictions_rank_by_id() {
        let m = OutcomeModel::zeros(
            ModelKind::MatrixFactorization,
            2,
            vec![UserId(1)],
            ids(&[5, 3, 9]),
        );
        let p = PolicySpec::personalized(Arc::new(m));
        assert_eq!(
            rank_stories(&p, ctx(1), &ids(&[9, 5, 3])).unwrap(),
            ids(&[3, 5, 9])
        );
    }

    #[test]
    fn popularity_order_is_user_invariant() {
        let mut m = OutcomeModel::zeros(
            ModelKind::TwoWayFixedEffects,
            0,
            vec![UserId(1), UserId(2)],
            ids(&[1, 2, 3]),
        );
        m.set_user(UserId(1), 3.0, &[]);
        m.set_user(UserId(2), -2.0, &[]);
        for (s, b) in [(1, 0.1), (2, 0.7), (3, -0.4)] {
            m.set_story(StoryId(s), b, &[]);
        }
        let p = PolicySpec::popularity(Arc::new(m));
        let a = rank_stories(&p, ctx(1), &ids(&[1, 2, 3])).unwrap();
        assert_eq!(a, ids(&[2, 1, 3]));
        assert_eq!(a, rank_stories(&p, ctx(2), &ids(&[3, 2, 1])).unwrap());
    }

    #[test]
    fn editorial_restricts_and_appends() {
        let mut script = EditorialScript::default();
        script.rankings.insert((1, 0), ids(&[7, 2, 9, 4]));
        let p = PolicySpec::editorial(Arc::new(script));
        assert_eq!(
            rank_stories(&p, ctx(1), &ids(&[4, 1, 7, 8])).unwrap(),
            ids(&[7, 4, 1, 8])
        );
        let gap = rank_stories(&p, UserContext { week: 3, ..ctx(1) }, &ids(&[1]));
        assert_eq!(gap, Err(PolicyError::ScriptGap { grade: 1, week: 3 }));
    }

    #[test]
    fn top_k_edges() {
        let r: Vec<StoryId> = (0..2200).map(StoryId).collect();
        assert_eq!(top_k(&r, 15).stories.len(), 15);
        assert_eq!(top_k(&r, 1).stories, ids(&[0]));
        let s = top_k(&r[..4], 15);
        assert!(s.short && s.stories.len() == 4);
    }

    #[test]
    fn exposure_cases() {
        let slate: Vec<StoryId> = (1..=15).map(StoryId).collect();
        let u = exposure_distribution(&slate, &[1.0; 15]).unwrap();
        assert!(u.values().all(|p| (p - 1.0 / 15.0).abs() < 1e-15));
        let mut one = [0.0; 15];
        one[0] = 1.0;
        let d = exposure_distribution(&slate, &one).unwrap();
        assert_eq!(d[&StoryId(1)], 1.0);
        assert_eq!(
            exposure_distribution(&slate, &[0.0; 15]),
            Err(PolicyError::ZeroMass)
        );
        // Geometric 0.5^r: rank-1 mass = 0.5 / (1 - 0.5^15) by the finite
        // geometric sum.
        let geo: Vec<f64> = (1..=15).map(|r| 0.5f64.powi(r)).collect();
        let g = exposure_distribution(&slate, &geo).unwrap();
        let expect = 0.5 / (1.0 - 0.5f64.powi(15));
        assert!((g[&StoryId(1)] - expect).abs() < 1e-15);
        assert!((g[&StoryId(1)] - 0.50001526).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn exposure_is_a_pmf(pe in prop::collection::vec(0.0f64..10.0, 15), len in 1usize..=15) {
            prop_assume!(pe[..len].iter().sum::<f64>() > 0.0);
            let slate: Vec<StoryId> = (0..len as u32).map(StoryId).collect();
            let d = exposure_distribution(&slate, &pe).unwrap();
            prop_assert!(d.values().all(|p| *p >= 0.0));
            prop_assert!((d.values().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn editorial_is_user_invariant(u1 in 0u32..1000, u2 in 0u32..1000) {
            let mut script = EditorialScript::default();
            script.rankings.insert((1, 0), ids(&[3, 1, 2]));
            let p = PolicySpec::editorial(Arc::new(script));
            prop_assert_eq!(rank_stories(&p, ctx(u1), &ids(&[1, 2, 3])).unwrap(), rank_stories(&p, ctx(u2), &ids(&[1, 2, 3])).unwrap());
        }
    }
}
