//! Weekly slate with daily removal of started stories and of an ignored top
//! block.

use super::{rank_stories, PolicyError, PolicySpec, UserContext};
use crate::log::StoryId;
use std::collections::{BTreeSet, HashSet};

/// Number of leading slate entries watched for completions.
pub const TOP_BLOCK: usize = 3;
/// Active days without a top-block completion before the block is dropped.
const IGNORED_DAYS: u8 = 2;

/// What a user did in the section on one day.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DayActivity {
    pub active: bool,
    pub started: BTreeSet<StoryId>,
    pub completed: BTreeSet<StoryId>,
}

impl DayActivity {
    pub fn inactive() -> Self {
        DayActivity::default()
    }
}

/// One user's slate for one week.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlateState {
    base: Vec<StoryId>,
    removed: HashSet<StoryId>,
    counter: u8,
    slate: Vec<StoryId>,
    slate_size: usize,
}

impl SlateState {
    /// Fresh weekly state from a base ranking.
    pub fn from_ranking(base: Vec<StoryId>, slate_size: usize) -> Self {
        let mut s = SlateState {
            base,
            removed: HashSet::new(),
            counter: 0,
            slate: Vec::new(),
            slate_size,
        };
        s.rebuild();
        s
    }

    /// Recompute the base ranking under `policy` and reset the week.
    pub fn weekly_refresh(
        policy: &PolicySpec,
        ctx: UserContext,
        candidates: &[StoryId],
    ) -> Result<Self, PolicyError> {
        Ok(Self::from_ranking(
            rank_stories(policy, ctx, candidates)?,
            policy.slate_size,
        ))
    }

    pub fn slate(&self) -> &[StoryId] {
        &self.slate
    }

    pub fn base(&self) -> &[StoryId] {
        &self.base
    }

    /// Fewer than `slate_size` stories remain.
    pub fn is_short(&self) -> bool {
        self.slate.len() < self.slate_size
    }

    pub fn counter(&self) -> u8 {
        self.counter
    }

    fn rebuild(&mut self) {
        self.slate = self
            .base
            .iter()
            .filter(|s| !self.removed.contains(s))
            .take(self.slate_size)
            .copied()
            .collect();
    }

    fn top(&self) -> Vec<StoryId> {
        self.slate.iter().take(TOP_BLOCK).copied().collect()
    }

    /// Apply one day of activity. Inactive days change nothing. On an active
    /// day the counter advances unless a current top-block story was
    /// completed (which resets it); reaching two drops the top block. Started
    /// and completed stories are removed, the slate is backfilled from the
    /// base ranking, and a changed top block resets the counter.
    pub fn daily_update(&mut self, day: &DayActivity) {
        if !day.active {
            return;
        }
        let top = self.top();
        if top.iter().any(|s| day.completed.contains(s)) {
            self.counter = 0;
        } else {
            self.counter += 1;
            if self.counter >= IGNORED_DAYS {
                self.removed.extend(top.iter().copied());
                self.counter = 0;
            }
        }
        self.removed.extend(day.started.iter().copied());
        self.removed.extend(day.completed.iter().copied());
        self.rebuild();
        if self.top() != top {
            self.counter = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(r: impl IntoIterator<Item = u32>) -> Vec<StoryId> {
        r.into_iter().map(StoryId).collect()
    }

    fn act(started: &[u32], completed: &[u32]) -> DayActivity {
        DayActivity {
            active: true,
            started: ids(started.iter().copied()).into_iter().collect(),
            completed: ids(completed.iter().copied()).into_iter().collect(),
        }
    }

    #[test]
    fn inactive_day_is_noop() {
        let mut s = SlateState::from_ranking(ids(1..=30), 15);
        let before = s.clone();
        s.daily_update(&DayActivity::inactive());
        assert_eq!(s, before);
    }

    #[test]
    fn started_stories_backfill_at_bottom() {
        let mut s = SlateState::from_ranking(ids(1..=30), 15);
        s.daily_update(&act(&[2, 5], &[]));
        let mut expect = ids([1, 3, 4]);
        expect.extend(ids(6..=17));
        assert_eq!(s.slate(), expect.as_slice());
    }

    #[test]
    fn two_ignored_days_drop_top_block() {
        let mut s = SlateState::from_ranking(ids(1..=30), 15);
        s.daily_update(&act(&[], &[]));
        assert_eq!(s.slate(), ids(1..=15).as_slice());
        s.daily_update(&act(&[], &[]));
        assert_eq!(s.slate(), ids(4..=18).as_slice());
    }

    #[test]
    fn completing_top_story_resets() {
        let mut s = SlateState::from_ranking(ids(1..=30), 15);
        s.daily_update(&act(&[], &[]));
        s.daily_update(&act(&[], &[1]));
        assert_eq!(s.counter(), 0);
        assert_eq!(s.slate(), ids(2..=16).as_slice());
    }

    #[test]
    fn exhausted_pool_shrinks() {
        let mut s = SlateState::from_ranking(ids(1..=16), 15);
        s.daily_update(&act(&[1, 2], &[]));
        assert_eq!(s.slate().len(), 14);
        assert!(s.is_short());
    }

    #[test]
    fn seven_day_trace() {
        // Hand trace over a 30-story base ranking.
        let mut s = SlateState::from_ranking(ids(1..=30), 15);
        let days = [
            act(&[2, 5], &[]),
            DayActivity::inactive(),
            act(&[], &[]),
            act(&[], &[]),
            act(&[], &[7]),
            act(&[12], &[]),
        ];
        let mut d7 = ids([6, 8, 9, 10, 11]);
        d7.extend(ids(13..=22));
        let mut d6 = ids([6]);
        d6.extend(ids(8..=21));
        let mut d2 = ids([1, 3, 4]);
        d2.extend(ids(6..=17));
        let expected = [d2.clone(), d2.clone(), d2, ids(6..=20), d6, d7];
        for (day, want) in days.iter().zip(expected.iter()) {
            s.daily_update(day);
            assert_eq!(s.slate(), want.as_slice());
        }
    }

    proptest! {
        #[test]
        fn started_never_return_and_order_kept(
            events in prop::collection::vec((any::<bool>(), prop::collection::btree_set(1u32..40, 0..4), prop::collection::btree_set(1u32..40, 0..2)), 1..7)
        ) {
            let mut s = SlateState::from_ranking(ids(1..=40), 15);
            let mut gone = BTreeSet::new();
            for (active, st, co) in events {
                let before = s.slate().to_vec();
                let day = DayActivity { active, started: ids(st.iter().copied()).into_iter().collect(), completed: ids(co.iter().copied()).into_iter().collect() };
                s.daily_update(&day);
                if active {
                    gone.extend(day.started.iter().copied());
                    gone.extend(day.completed.iter().copied());
                }
                prop_assert!(s.slate().iter().all(|x| !gone.contains(x)));
                let survivors: Vec<_> = before.iter().filter(|x| s.slate().contains(x)).collect();
                let positions: Vec<_> = survivors.iter().map(|x| s.slate().iter().position(|y| y == *x).unwrap()).collect();
                prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
