//! Day-by-day log generation.

use super::{OutcomeDraw, SimError, World};
use crate::log::{InteractionRecord, LogDataset, OutcomeKind, Section, StoryId, UserId};
use crate::par;
use crate::policy::{
    normalized_exposure, week_of, DayActivity, PolicySpec, SlateState, UserContext,
};
use crate::seed;
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use std::collections::{BTreeSet, HashMap};

pub const OTHER_SECTION: &str = "other";

/// Which policy serves the ranked section for each user.
#[derive(Debug, Clone)]
pub struct PolicyAssignment {
    pub policies: Vec<PolicySpec>,
    pub of_user: HashMap<UserId, usize>,
    pub default: usize,
}

impl PolicyAssignment {
    pub fn everyone(policy: PolicySpec) -> Self {
        PolicyAssignment {
            policies: vec![policy],
            of_user: HashMap::new(),
            default: 0,
        }
    }

    pub fn policy(&self, u: UserId) -> &PolicySpec {
        &self.policies[*self.of_user.get(&u).unwrap_or(&self.default)]
    }
}

fn poisson<R: Rng>(rate: f64, rng: &mut R) -> usize {
    if rate > 0.0 {
        Poisson::new(rate).expect("positive rate").sample(rng) as usize
    } else {
        0
    }
}

struct UserSim<'a> {
    world: &'a World,
    user: UserId,
    session: u32,
    out: Vec<InteractionRecord>,
}

impl UserSim<'_> {
    fn record(
        &mut self,
        story: StoryId,
        day: i32,
        section: Section,
        rank: Option<u8>,
        outcome: OutcomeKind,
    ) {
        self.out.push(InteractionRecord {
            user_id: self.user,
            story_id: story,
            day,
            session_id: self.session,
            section,
            slate_rank: rank,
            outcome,
        });
    }

    /// Ranks shallower than the deepest interacted rank that saw no
    /// interaction are logged NotShown.
    fn close_session(&mut self, slate: &[StoryId], used: &mut [bool], day: i32) {
        let deepest = used.iter().rposition(|u| *u);
        if let Some(d) = deepest {
            if self.world.config.log_not_shown {
                for r in 0..d {
                    if !used[r] {
                        self.record(
                            slate[r],
                            day,
                            Section::Recommended,
                            Some(r as u8 + 1),
                            OutcomeKind::NotShown,
                        );
                    }
                }
            }
        }
        used.iter_mut().for_each(|u| *u = false);
    }
}

fn simulate_user(
    world: &World,
    policy: &PolicySpec,
    user: UserId,
    days: std::ops::Range<i32>,
    root: u64,
) -> Result<Vec<InteractionRecord>, SimError> {
    let cfg = &world.config;
    let i = user.0 as usize;
    let grade = world.grade(user);
    let catalog = world.catalog();
    let mut rng = seed::rng(seed::derive(
        root,
        &[user.0 as u64, days.start as i64 as u64],
    ));
    let mut sim = UserSim {
        world,
        user,
        session: 0,
        out: Vec::new(),
    };
    let mut state: Option<(i32, SlateState)> = None;
    for day in days {
        let week = week_of(day);
        if state.as_ref().is_none_or(|(w, _)| *w != week) {
            let mut s =
                SlateState::weekly_refresh(policy, UserContext { user, grade, week }, &catalog)?;
            if s.slate().len() > cfg.slate_size {
                s = SlateState::from_ranking(s.base().to_vec(), cfg.slate_size);
            }
            state = Some((week, s));
        }
        if !rng.random_bool(world.activity.active_prob[i]) {
            continue;
        }
        let st = &mut state.as_mut().expect("set above").1;
        let slate = st.slate().to_vec();
        let pe = normalized_exposure(&cfg.position_effects, slate.len())?;
        let mut rate = world.activity.rate[i];
        if cfg.elastic_usage {
            let value: f64 = slate
                .iter()
                .zip(&pe)
                .map(|(s, p)| p * world.truth.mu(user, *s))
                .sum();
            rate *= (value / world.activity.reference_value[i]).powf(cfg.elasticity);
        }
        let n = poisson(rate, &mut rng);
        let m = poisson(world.activity.other_rate[i], &mut rng).min(catalog.len());

        let mut activity = DayActivity {
            active: n > 0,
            started: BTreeSet::new(),
            completed: BTreeSet::new(),
        };
        if n > 0 {
            let pick = WeightedIndex::new(&pe).expect("positive mass");
            let mut used = vec![false; slate.len()];
            sim.session += 1;
            for _ in 0..n {
                let r = pick.sample(&mut rng);
                if used[r] {
                    sim.close_session(&slate, &mut used, day);
                    sim.session += 1;
                }
                used[r] = true;
                let story = slate[r];
                let outcome = OutcomeDraw::for_mean(world.truth.mu(user, story)).sample(&mut rng);
                match outcome {
                    OutcomeKind::Completed => {
                        activity.completed.insert(story);
                    }
                    OutcomeKind::Started => {
                        activity.started.insert(story);
                    }
                    _ => {}
                }
                sim.record(story, day, Section::Recommended, Some(r as u8 + 1), outcome);
            }
            sim.close_session(&slate, &mut used, day);
        } else if m == 0 && cfg.log_not_shown && !slate.is_empty() {
            // App opened, slate seen, nothing touched.
            sim.session += 1;
            sim.record(
                slate[0],
                day,
                Section::Recommended,
                Some(1),
                OutcomeKind::NotShown,
            );
        }
        if m > 0 {
            sim.session += 1;
            let mut picks = rand::seq::index::sample(&mut rng, catalog.len(), m).into_vec();
            picks.sort_unstable();
            for j in picks {
                let story = catalog[j];
                let outcome = OutcomeDraw::for_mean(world.truth.mu(user, story)).sample(&mut rng);
                sim.record(
                    story,
                    day,
                    Section::Other(OTHER_SECTION.into()),
                    None,
                    outcome,
                );
            }
        }
        if cfg.slate_dynamics {
            st.daily_update(&activity);
        }
    }
    Ok(sim.out)
}

/// Simulate every user of the world over `days`. Each user draws from an
/// independent stream derived from `seed` and the user id, so the result does
/// not depend on how users are scheduled.
pub fn simulate_period(
    world: &World,
    assignment: &PolicyAssignment,
    days: std::ops::Range<i32>,
    seed: u64,
) -> Result<LogDataset, SimError> {
    let users = world.user_ids();
    let parts = par::map(&users, |u| {
        simulate_user(world, assignment.policy(*u), *u, days.clone(), seed)
    });
    let mut records = Vec::new();
    for p in parts {
        records.extend(p?);
    }
    let mut data = LogDataset::new(records, world.users.clone(), world.stories.clone())?;
    if days.end > days.start {
        data = data.window(days.start, days.end);
    }
    Ok(data)
}
