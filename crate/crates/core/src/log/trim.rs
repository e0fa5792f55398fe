//! Removal of users whose logs look like instrumentation errors.

use super::{LogDataset, OutcomeKind, UserId};
use std::collections::{BTreeMap, BTreeSet, HashMap};

/// How ties at the percentile threshold were resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TieDecision {
    /// Nothing to trim (empty data or `pct == 0`).
    NoThreshold,
    /// Every user whose statistic equals the threshold value was dropped.
    TiesDropped,
    /// Dropping the tie group would have removed every user; nobody was dropped.
    AllTiedKeptAll,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrimReport {
    pub dropped: Vec<UserId>,
    /// Per-user statistic value at the cut, when one exists.
    pub threshold: Option<u32>,
    pub ties: TieDecision,
}

fn drop_users(data: &LogDataset, dropped: &BTreeSet<UserId>) -> LogDataset {
    data.filter(|r| !dropped.contains(&r.user_id))
}

/// Drop every user with at least one session holding more than
/// `max_completions_per_session` completed stories.
pub fn trim_outliers(
    data: &LogDataset,
    max_completions_per_session: u32,
) -> (LogDataset, Vec<UserId>) {
    let mut per_session: HashMap<(UserId, i32, u32), u32> = HashMap::new();
    for r in data
        .records()
        .iter()
        .filter(|r| r.outcome == OutcomeKind::Completed)
    {
        *per_session
            .entry((r.user_id, r.day, r.session_id))
            .or_insert(0) += 1;
    }
    let dropped: BTreeSet<UserId> = per_session
        .into_iter()
        .filter(|&(_, n)| n > max_completions_per_session)
        .map(|((u, _, _), _)| u)
        .collect();
    (drop_users(data, &dropped), dropped.into_iter().collect())
}

/// Drop users in the top `pct` share by their largest number of completed
/// stories on a single day.
///
/// Users are ranked descending by that statistic (ties by ascending id);
/// the cut is the value held by the user at rank `ceil(pct * N)` and every
/// user at or above it is dropped.
pub fn trim_top_daily_percentile(data: &LogDataset, pct: f64) -> (LogDataset, TrimReport) {
    let mut daily: HashMap<(UserId, i32), u32> = HashMap::new();
    let mut stat: BTreeMap<UserId, u32> = BTreeMap::new();
    for r in data.records() {
        stat.entry(r.user_id).or_insert(0);
        if r.outcome == OutcomeKind::Completed {
            *daily.entry((r.user_id, r.day)).or_insert(0) += 1;
        }
    }
    for ((u, _), n) in daily {
        let e = stat.get_mut(&u).expect("user registered above");
        *e = (*e).max(n);
    }
    let n_cut = (pct * stat.len() as f64).ceil() as usize;
    if pct <= 0.0 || n_cut == 0 {
        return (
            data.clone(),
            TrimReport {
                dropped: Vec::new(),
                threshold: None,
                ties: TieDecision::NoThreshold,
            },
        );
    }
    let mut ranked: Vec<(UserId, u32)> = stat.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let threshold = ranked[n_cut.min(ranked.len()) - 1].1;
    let min = ranked.last().map(|x| x.1).unwrap_or(0);
    if threshold <= min {
        return (
            data.clone(),
            TrimReport {
                dropped: Vec::new(),
                threshold: Some(threshold),
                ties: TieDecision::AllTiedKeptAll,
            },
        );
    }
    let dropped: BTreeSet<UserId> = ranked
        .iter()
        .filter(|(_, s)| *s >= threshold)
        .map(|(u, _)| *u)
        .collect();
    let trimmed = drop_users(data, &dropped);
    (
        trimmed,
        TrimReport {
            dropped: dropped.into_iter().collect(),
            threshold: Some(threshold),
            ties: TieDecision::TiesDropped,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log::{Channel, InteractionRecord, Section, StoryId, StoryMeta, UserProfile};
    use std::collections::BTreeMap;

    fn dataset(spec: &[(u32, i32, u32, u32)]) -> LogDataset {
        // (user, day, session, completions)
        let mut records = Vec::new();
        let mut users = BTreeMap::new();
        let mut stories = BTreeMap::new();
        for &(u, day, session, n) in spec {
            users.insert(
                UserId(u),
                UserProfile {
                    user_id: UserId(u),
                    grade: 1,
                    channel: Channel::B2C,
                    registration_day: 0,
                },
            );
            for s in 0..n.max(1) {
                stories.insert(
                    StoryId(s),
                    StoryMeta {
                        story_id: StoryId(s),
                        collection_tag: "t".into(),
                        minutes_lo: 1.0,
                        minutes_hi: 2.0,
                    },
                );
                records.push(InteractionRecord {
                    user_id: UserId(u),
                    story_id: StoryId(s),
                    day,
                    session_id: session,
                    section: Section::Other("other".into()),
                    slate_rank: None,
                    outcome: if n == 0 {
                        OutcomeKind::Viewed
                    } else {
                        OutcomeKind::Completed
                    },
                });
            }
        }
        LogDataset::new(records, users, stories).unwrap()
    }

    #[test]
    fn ten_is_not_more_than_ten() {
        let d = dataset(&[(1, 0, 0, 10), (1, 1, 1, 3), (2, 0, 0, 11), (2, 1, 1, 1)]);
        let (t, dropped) = trim_outliers(&d, 10);
        assert_eq!(dropped, vec![UserId(2)]);
        assert!(t.records().iter().all(|r| r.user_id == UserId(1)));
        assert_eq!(t.len(), 13);
    }

    #[test]
    fn trimming_is_idempotent() {
        let d = dataset(&[(1, 0, 0, 12), (2, 0, 0, 4), (3, 2, 5, 11)]);
        let (once, _) = trim_outliers(&d, 10);
        let (twice, again) = trim_outliers(&once, 10);
        assert_eq!(once, twice);
        assert!(again.is_empty());
    }

    #[test]
    fn percentile_drops_the_single_heavy_user() {
        // Brute force: 20 users, maxima [50, 3, 3, 2, 1, ...]; ceil(0.05 * 20) = 1
        // so the cut is the largest value and only its holder goes.
        let mut spec = vec![(0, 0, 0, 50)];
        for u in 1..20 {
            spec.push((u, 0, 0, 1 + (u % 3)));
        }
        let d = dataset(&spec);
        let (_, rep) = trim_top_daily_percentile(&d, 0.05);
        assert_eq!(rep.dropped, vec![UserId(0)]);
        assert_eq!(rep.threshold, Some(50));
        assert_eq!(rep.ties, TieDecision::TiesDropped);
    }

    #[test]
    fn percentile_all_tied_keeps_everyone() {
        let spec: Vec<_> = (0..10).map(|u| (u, 0, 0, 2)).collect();
        let d = dataset(&spec);
        let (t, rep) = trim_top_daily_percentile(&d, 0.05);
        assert!(rep.dropped.is_empty());
        assert_eq!(rep.ties, TieDecision::AllTiedKeptAll);
        assert_eq!(t, d);
    }

    #[test]
    fn percentile_zero_is_identity() {
        let d = dataset(&[(1, 0, 0, 5), (2, 0, 0, 1)]);
        let (t, rep) = trim_top_daily_percentile(&d, 0.0);
        assert_eq!(t, d);
        assert_eq!(rep.ties, TieDecision::NoThreshold);
    }

    #[test]
    fn percentile_uses_daily_totals_across_sessions() {
        // user 1: two sessions on day 0 (3 + 3 = 6); user 2: 5 on one day.
        let d = dataset(&[(1, 0, 0, 3), (1, 0, 1, 3), (2, 0, 0, 5), (3, 0, 0, 1)]);
        let (_, rep) = trim_top_daily_percentile(&d, 0.2);
        assert_eq!(rep.dropped, vec![UserId(1)]);
    }
}
