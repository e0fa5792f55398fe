//! Interaction logs: who saw which story, where, and how far they got.

mod covariates;
mod io;
mod trim;

pub use covariates::{compute_covariates, CovariateConfig, UserCovariates};
pub use io::{
    emit_log, emit_stories, emit_users, ingest, ingest_log, read_stories, read_users,
    IngestOptions, IngestReport, RowError,
};
pub use trim::{trim_outliers, trim_top_daily_percentile, TieDecision, TrimReport};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

/// Largest slate position that can appear in a log.
pub const MAX_SLATE_RANK: u8 = 15;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: invariant violated: {reason}")]
    Invariant { line: usize, reason: String },
    #[error("{} rejected rows, first: {}", .0.len(), .0[0])]
    Rejected(Vec<RowError>),
}

impl LogError {
    /// Line numbers of every rejected row.
    pub fn lines(&self) -> Vec<usize> {
        match self {
            LogError::Parse { line, .. } | LogError::Invariant { line, .. } => vec![*line],
            LogError::Rejected(rows) => rows.iter().map(|r| r.line).collect(),
            LogError::Io(_) => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UserId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StoryId(pub u32);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for StoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    B2B,
    B2C,
    Paid,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::B2B, Channel::B2C, Channel::Paid];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::B2B => "B2B",
            Channel::B2C => "B2C",
            Channel::Paid => "PAID",
        }
    }

    pub fn parse(s: &str) -> Option<Channel> {
        match s {
            "B2B" => Some(Channel::B2B),
            "B2C" => Some(Channel::B2C),
            "PAID" => Some(Channel::Paid),
            _ => None,
        }
    }
}

pub const DEFAULT_GRADES: std::ops::RangeInclusive<u8> = 1..=8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: UserId,
    pub grade: u8,
    pub channel: Channel,
    pub registration_day: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryMeta {
    pub story_id: StoryId,
    pub collection_tag: String,
    pub minutes_lo: f64,
    pub minutes_hi: f64,
}

impl StoryMeta {
    /// Estimated reading time in minutes: midpoint of the stated interval.
    pub fn reading_time_midpoint(&self) -> f64 {
        0.5 * (self.minutes_lo + self.minutes_hi)
    }
}

/// How far a user got with a story they were shown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutcomeKind {
    Completed,
    Started,
    Viewed,
    Skipped,
    NotShown,
}

impl OutcomeKind {
    pub const ALL: [OutcomeKind; 5] = [
        OutcomeKind::Completed,
        OutcomeKind::Started,
        OutcomeKind::Viewed,
        OutcomeKind::Skipped,
        OutcomeKind::NotShown,
    ];

    /// Story Engagement value; `None` for exposures without an interaction.
    pub fn value(self) -> Option<f64> {
        score_outcome(self)
    }

    /// Any record except a bare exposure.
    pub fn is_interaction(self) -> bool {
        self != OutcomeKind::NotShown
    }

    /// Viewed, started or completed: the user consumed part of the story.
    pub fn is_engaged(self) -> bool {
        matches!(
            self,
            OutcomeKind::Completed | OutcomeKind::Started | OutcomeKind::Viewed
        )
    }

    pub fn is_started(self) -> bool {
        matches!(self, OutcomeKind::Completed | OutcomeKind::Started)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeKind::Completed => "COMPLETED",
            OutcomeKind::Started => "STARTED",
            OutcomeKind::Viewed => "VIEWED",
            OutcomeKind::Skipped => "SKIPPED",
            OutcomeKind::NotShown => "NOT_SHOWN",
        }
    }

    pub fn parse(s: &str) -> Option<OutcomeKind> {
        OutcomeKind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

/// The five-point Story Engagement score.
pub fn score_outcome(kind: OutcomeKind) -> Option<f64> {
    match kind {
        OutcomeKind::Completed => Some(1.0),
        OutcomeKind::Started => Some(0.5),
        OutcomeKind::Viewed => Some(0.3),
        OutcomeKind::Skipped => Some(0.0),
        OutcomeKind::NotShown => None,
    }
}

/// App section. Only the recommended-story section shows a ranked slate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Section {
    Recommended,
    Other(String),
}

impl Section {
    pub const RECOMMENDED_NAME: &'static str = "recommended_story";

    pub fn is_ranked(&self) -> bool {
        matches!(self, Section::Recommended)
    }

    pub fn name(&self) -> &str {
        match self {
            Section::Recommended => Self::RECOMMENDED_NAME,
            Section::Other(n) => n,
        }
    }

    pub fn parse(s: &str) -> Section {
        if s == Self::RECOMMENDED_NAME {
            Section::Recommended
        } else {
            Section::Other(s.to_string())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: UserId,
    pub story_id: StoryId,
    pub day: i32,
    pub session_id: u32,
    pub section: Section,
    pub slate_rank: Option<u8>,
    pub outcome: OutcomeKind,
}

impl InteractionRecord {
    pub fn value(&self) -> Option<f64> {
        self.outcome.value()
    }

    fn sort_key(&self) -> (UserId, i32, u32) {
        (self.user_id, self.day, self.session_id)
    }
}

/// An immutable, validated collection of interaction records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LogDataset {
    records: Vec<InteractionRecord>,
    pub users: BTreeMap<UserId, UserProfile>,
    pub stories: BTreeMap<StoryId, StoryMeta>,
    period: Option<(i32, i32)>,
}

impl LogDataset {
    /// Build a dataset, sorting records by (user, day, session) while keeping
    /// the within-session order. Validates keys and slate ranks.
    pub fn new(
        mut records: Vec<InteractionRecord>,
        users: BTreeMap<UserId, UserProfile>,
        stories: BTreeMap<StoryId, StoryMeta>,
    ) -> Result<LogDataset, LogError> {
        for (i, r) in records.iter().enumerate() {
            check_record(r).map_err(|reason| LogError::Invariant {
                line: i + 1,
                reason,
            })?;
        }
        records.sort_by_key(|r| r.sort_key());
        let mut seen = std::collections::HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if !seen.insert((r.user_id, r.story_id, r.day, r.session_id)) {
                return Err(LogError::Invariant {
                    line: i + 1,
                    reason: format!(
                        "duplicate key (user {}, story {}, day {}, session {})",
                        r.user_id, r.story_id, r.day, r.session_id
                    ),
                });
            }
            if !users.contains_key(&r.user_id) {
                return Err(LogError::Invariant {
                    line: i + 1,
                    reason: format!("unregistered user {}", r.user_id),
                });
            }
            if !stories.contains_key(&r.story_id) {
                return Err(LogError::Invariant {
                    line: i + 1,
                    reason: format!("unregistered story {}", r.story_id),
                });
            }
        }
        let period =
            records
                .iter()
                .map(|r| r.day)
                .fold(None, |acc: Option<(i32, i32)>, d| match acc {
                    None => Some((d, d)),
                    Some((lo, hi)) => Some((lo.min(d), hi.max(d))),
                });
        Ok(LogDataset {
            records,
            users,
            stories,
            period,
        })
    }

    pub fn records(&self) -> &[InteractionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// First and last day with a record; `None` for an empty log.
    pub fn period(&self) -> Option<(i32, i32)> {
        self.period
    }

    /// Records that carry an engagement value (everything but NotShown).
    pub fn scored(&self) -> impl Iterator<Item = (&InteractionRecord, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.value().map(|v| (r, v)))
    }

    /// Keep records matching `keep`; user and story indexes are retained.
    pub fn filter<F: Fn(&InteractionRecord) -> bool>(&self, keep: F) -> LogDataset {
        let records: Vec<_> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        LogDataset {
            records,
            users: self.users.clone(),
            stories: self.stories.clone(),
            period: self.period,
        }
    }

    /// Records with `lo <= day < hi`.
    pub fn window(&self, lo: i32, hi: i32) -> LogDataset {
        let mut d = self.filter(|r| r.day >= lo && r.day < hi);
        d.period = if hi > lo { Some((lo, hi - 1)) } else { None };
        d
    }

    /// Concatenate two datasets with disjoint keys.
    pub fn merge(&self, other: &LogDataset) -> Result<LogDataset, LogError> {
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        let mut users = self.users.clone();
        users.extend(other.users.iter().map(|(k, v)| (*k, v.clone())));
        let mut stories = self.stories.clone();
        stories.extend(other.stories.iter().map(|(k, v)| (*k, v.clone())));
        LogDataset::new(records, users, stories)
    }

    /// Number of interactions (non-NotShown records) per user and per story.
    pub fn interaction_counts(
        &self,
    ) -> (
        std::collections::HashMap<UserId, usize>,
        std::collections::HashMap<StoryId, usize>,
    ) {
        let mut u = std::collections::HashMap::new();
        let mut s = std::collections::HashMap::new();
        for r in self.records.iter().filter(|r| r.outcome.is_interaction()) {
            *u.entry(r.user_id).or_insert(0) += 1;
            *s.entry(r.story_id).or_insert(0) += 1;
        }
        (u, s)
    }
}

pub(crate) fn check_record(r: &InteractionRecord) -> Result<(), String> {
    match (r.section.is_ranked(), r.slate_rank) {
        (true, None) => return Err("ranked section without slate_rank".into()),
        (false, Some(_)) => {
            return Err(format!(
                "slate_rank given for unranked section '{}'",
                r.section.name()
            ))
        }
        (true, Some(rank)) if !(1..=MAX_SLATE_RANK).contains(&rank) => {
            return Err(format!("slate_rank {rank} outside 1..={MAX_SLATE_RANK}"))
        }
        _ => {}
    }
    if r.section.name().is_empty() || r.section.name().contains([',', '\n']) {
        return Err("section name must be non-empty without commas".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_mapping() {
        assert_eq!(score_outcome(OutcomeKind::Completed), Some(1.0));
        assert_eq!(score_outcome(OutcomeKind::Started), Some(0.5));
        assert_eq!(score_outcome(OutcomeKind::Viewed), Some(0.3));
        assert_eq!(score_outcome(OutcomeKind::Skipped), Some(0.0));
        assert_eq!(score_outcome(OutcomeKind::NotShown), None);
    }

    #[test]
    fn score_is_injective() {
        let vals: Vec<String> = OutcomeKind::ALL
            .iter()
            .map(|k| format!("{:?}", k.value()))
            .collect();
        let uniq: std::collections::HashSet<_> = vals.iter().collect();
        assert_eq!(uniq.len(), 5);
    }

    #[test]
    fn midpoint() {
        let s = StoryMeta {
            story_id: StoryId(1),
            collection_tag: "animal".into(),
            minutes_lo: 2.0,
            minutes_hi: 4.0,
        };
        assert_eq!(s.reading_time_midpoint(), 3.0);
    }

    #[test]
    fn outcome_text_round_trip() {
        for k in OutcomeKind::ALL {
            assert_eq!(OutcomeKind::parse(k.as_str()), Some(k));
        }
        assert_eq!(OutcomeKind::parse("0.4"), None);
    }
}
