//! Synthetic worlds with known preferences.
//!
//! True expected engagement is `sigmoid(b0 + a_i + c_j + <x_i, z_j>)`. Users
//! fall into a mainstream and a niche segment whose first latent coordinate
//! has opposite sign; story effects are coupled to the first story
//! coordinate, so what mainstream users like is also what is popular.

mod draw;
mod experiment;
mod period;

pub use draw::{cascade_mean, OutcomeDraw};
pub use experiment::{
    run_experiment, slate_value, true_policy_value, true_value_of_slates, Arm, ArmPolicy,
    ExperimentPlan, ExperimentRun, PolicyValue,
};
pub use period::{simulate_period, PolicyAssignment, OTHER_SECTION};

use crate::log::{Channel, LogError, StoryId, StoryMeta, UserId, UserProfile, DEFAULT_GRADES};
use crate::models::{sigmoid, ModelError};
use crate::policy::{normalized_exposure, EditorialScript, PolicyError, DEFAULT_SLATE_SIZE};
use crate::seed;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gumbel, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid world configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Log(#[from] LogError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_users: u32,
    pub n_stories: u32,
    pub latent_dim: usize,
    /// Share of users in the niche segment.
    pub niche_share: f64,
    /// Magnitude of the segment coordinate of user vectors.
    pub segment_strength: f64,
    pub user_latent_sd: f64,
    pub story_latent_sd: f64,
    pub base_logit: f64,
    pub user_effect_sd: f64,
    pub story_effect_sd: f64,
    /// Weight of the first story coordinate in the story effect.
    pub popularity_coupling: f64,
    pub grades: Vec<u8>,
    /// Shares of B2B, B2C and paid users.
    pub channel_shares: [f64; 3],
    /// Daily activity probabilities are uniform on this interval.
    pub active_prob: [f64; 2],
    /// Section interactions per active day: Poisson with a log-normal rate.
    pub rate_log_mean: f64,
    pub rate_log_sd: f64,
    /// Rate of the aggregate other section relative to the section rate.
    pub other_ratio: f64,
    pub position_effects: Vec<f64>,
    /// Scale of the Gumbel noise on the editorial ranking.
    pub editorial_noise: f64,
    pub script_weeks: i32,
    pub slate_size: usize,
    /// Apply the daily slate update; off keeps each weekly slate fixed.
    pub slate_dynamics: bool,
    pub log_not_shown: bool,
    /// Scale section activity by (slate value / reference value)^elasticity.
    pub elastic_usage: bool,
    pub elasticity: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 1,
            n_users: 800,
            n_stories: 350,
            latent_dim: 2,
            niche_share: 0.3,
            segment_strength: 1.5,
            user_latent_sd: 0.5,
            story_latent_sd: 1.0,
            base_logit: -0.8,
            user_effect_sd: 0.5,
            story_effect_sd: 0.3,
            popularity_coupling: 0.6,
            grades: vec![1, 2, 3, 4],
            channel_shares: [0.5, 0.4, 0.1],
            active_prob: [0.35, 0.85],
            rate_log_mean: 2f64.ln(),
            rate_log_sd: 0.5,
            other_ratio: 1.0,
            position_effects: (0..DEFAULT_SLATE_SIZE as i32)
                .map(|r| 0.8f64.powi(r))
                .collect(),
            editorial_noise: 0.7,
            script_weeks: 16,
            slate_size: DEFAULT_SLATE_SIZE,
            slate_dynamics: true,
            log_not_shown: true,
            elastic_usage: false,
            elasticity: 1.0,
        }
    }
}

impl WorldConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let cfg: WorldConfig = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.n_users == 0 || self.n_stories == 0 || self.latent_dim == 0 {
            return bad("n_users, n_stories and latent_dim must be positive".into());
        }
        if self.slate_size == 0 || self.slate_size > crate::log::MAX_SLATE_RANK as usize {
            return bad(format!(
                "slate_size must be in 1..={}",
                crate::log::MAX_SLATE_RANK
            ));
        }
        if (self.n_stories as usize) < self.slate_size {
            return bad("n_stories must be at least slate_size".into());
        }
        if !(0.0..=1.0).contains(&self.niche_share) {
            return bad("niche_share must be in [0, 1]".into());
        }
        if self.grades.is_empty() || self.grades.iter().any(|g| !DEFAULT_GRADES.contains(g)) {
            return bad(format!(
                "grades must be non-empty and within {DEFAULT_GRADES:?}"
            ));
        }
        let [lo, hi] = self.active_prob;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return bad("active_prob must be an interval inside [0, 1]".into());
        }
        if self.channel_shares.iter().any(|s| *s < 0.0)
            || self.channel_shares.iter().sum::<f64>() <= 0.0
        {
            return bad("channel_shares must be non-negative with positive sum".into());
        }
        if self.position_effects.len() < self.slate_size {
            return bad(format!("need {} position effects", self.slate_size));
        }
        normalized_exposure(&self.position_effects, self.slate_size)
            .map_err(|e| SimError::Config(e.to_string()))?;
        let sds = [
            self.user_latent_sd,
            self.story_latent_sd,
            self.user_effect_sd,
            self.story_effect_sd,
            self.rate_log_sd,
            self.editorial_noise,
        ];
        if sds.iter().any(|s| !(*s >= 0.0)) || !(self.other_ratio >= 0.0) || self.script_weeks <= 0
        {
            return bad("scales and ratios must be non-negative, script_weeks positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Mainstream,
    Niche,
}

/// True preferences. Users and stories are indexed by their id.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub k: usize,
    pub b0: f64,
    pub user_effect: Vec<f64>,
    pub story_effect: Vec<f64>,
    pub user_vec: Vec<f64>,
    pub story_vec: Vec<f64>,
    pub segment: Vec<Segment>,
}

impl GroundTruth {
    pub fn logit(&self, u: UserId, s: StoryId) -> f64 {
        let (i, j, k) = (u.0 as usize, s.0 as usize, self.k);
        let dot: f64 = self.user_vec[i * k..(i + 1) * k]
            .iter()
            .zip(&self.story_vec[j * k..(j + 1) * k])
            .map(|(a, b)| a * b)
            .sum();
        self.b0 + self.user_effect[i] + self.story_effect[j] + dot
    }

    /// True expected engagement of user `u` with story `s`.
    pub fn mu(&self, u: UserId, s: StoryId) -> f64 {
        sigmoid(self.logit(u, s))
    }
}

/// Per-user activity parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityModel {
    pub active_prob: Vec<f64>,
    pub rate: Vec<f64>,
    pub other_rate: Vec<f64>,
    /// Expected per-interaction engagement of the user's first editorial
    /// slate; the reference point for elastic usage.
    pub reference_value: Vec<f64>,
}

impl ActivityModel {
    /// Expected section interactions over `days` days without elastic usage.
    pub fn expected_interactions(&self, u: UserId, days: i32) -> f64 {
        let i = u.0 as usize;
        days as f64 * self.active_prob[i] * self.rate[i]
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub users: BTreeMap<UserId, UserProfile>,
    pub stories: BTreeMap<StoryId, StoryMeta>,
    pub truth: GroundTruth,
    pub activity: ActivityModel,
    pub script: Arc<EditorialScript>,
}

impl World {
    pub fn catalog(&self) -> Vec<StoryId> {
        self.stories.keys().copied().collect()
    }

    pub fn user_ids(&self) -> Vec<UserId> {
        self.users.keys().copied().collect()
    }

    pub fn grade(&self, u: UserId) -> u8 {
        self.users[&u].grade
    }

    pub fn position_effects(&self) -> &[f64] {
        &self.config.position_effects[..self.config.slate_size]
    }
}

const TAGS: [&str; 6] = [
    "adventure",
    "animals",
    "science",
    "history",
    "poetry",
    "humor",
];

/// Build a world deterministically from its configuration.
pub fn make_world(config: &WorldConfig) -> Result<World, SimError> {
    config.validate()?;
    let k = config.latent_dim;
    let nu = config.n_users as usize;
    let ns = config.n_stories as usize;
    let mut rng = seed::rng(seed::derive(config.seed, &[seed::tag("world")]));
    let n01 = Normal::new(0.0, 1.0).expect("unit normal");

    let mut order: Vec<usize> = (0..nu).collect();
    order.shuffle(&mut rng);
    let n_niche = (config.niche_share * nu as f64).round() as usize;
    let mut segment = vec![Segment::Mainstream; nu];
    for &i in &order[..n_niche] {
        segment[i] = Segment::Niche;
    }

    let mut user_vec = vec![0.0; nu * k];
    let mut user_effect = vec![0.0; nu];
    for i in 0..nu {
        let sign = if segment[i] == Segment::Niche {
            -1.0
        } else {
            1.0
        };
        for f in 0..k {
            let centre = if f == 0 {
                sign * config.segment_strength
            } else {
                0.0
            };
            user_vec[i * k + f] = centre + config.user_latent_sd * n01.sample(&mut rng);
        }
        user_effect[i] = config.user_effect_sd * n01.sample(&mut rng);
    }
    let mut story_vec = vec![0.0; ns * k];
    let mut story_effect = vec![0.0; ns];
    for j in 0..ns {
        for f in 0..k {
            story_vec[j * k + f] = config.story_latent_sd * n01.sample(&mut rng);
        }
        story_effect[j] = config.story_effect_sd * n01.sample(&mut rng)
            + config.popularity_coupling * story_vec[j * k];
    }
    let truth = GroundTruth {
        k,
        b0: config.base_logit,
        user_effect,
        story_effect,
        user_vec,
        story_vec,
        segment,
    };

    let total_share: f64 = config.channel_shares.iter().sum();
    let mut users = BTreeMap::new();
    for i in 0..nu {
        let grade = config.grades[rng.random_range(0..config.grades.len())];
        let mut c = rng.random::<f64>() * total_share;
        let mut channel = Channel::Paid;
        for (ch, share) in Channel::ALL.iter().zip(config.channel_shares) {
            if c < share {
                channel = *ch;
                break;
            }
            c -= share;
        }
        let id = UserId(i as u32);
        users.insert(
            id,
            UserProfile {
                user_id: id,
                grade,
                channel,
                registration_day: -rng.random_range(1..=365),
            },
        );
    }
    let mut stories = BTreeMap::new();
    for j in 0..ns {
        let id = StoryId(j as u32);
        let lo = [1.0, 2.0, 3.0, 5.0][rng.random_range(0..4)];
        let hi = lo + [0.0, 1.0, 2.0, 3.0][rng.random_range(0..4)];
        let tag = TAGS[rng.random_range(0..TAGS.len())].to_string();
        stories.insert(
            id,
            StoryMeta {
                story_id: id,
                collection_tag: tag,
                minutes_lo: lo,
                minutes_hi: hi,
            },
        );
    }

    let [plo, phi] = config.active_prob;
    let rate_dist = LogNormal::new(config.rate_log_mean, config.rate_log_sd)
        .map_err(|e| SimError::Config(e.to_string()))?;
    let active_prob: Vec<f64> = (0..nu)
        .map(|_| plo + (phi - plo) * rng.random::<f64>())
        .collect();
    let rate: Vec<f64> = (0..nu).map(|_| rate_dist.sample(&mut rng)).collect();
    let other_rate: Vec<f64> = rate.iter().map(|r| r * config.other_ratio).collect();

    // Editorial appeal is what a typical mainstream user would like.
    let mut script = EditorialScript::default();
    let gumbel = Gumbel::new(0.0, 1.0).expect("standard gumbel");
    for &g in &config.grades {
        for w in 0..config.script_weeks {
            let mut srng = seed::rng(seed::derive(
                config.seed,
                &[seed::tag("script"), g as u64, w as u64],
            ));
            let mut scored: Vec<(StoryId, f64)> = (0..ns)
                .map(|j| {
                    let appeal =
                        truth.story_effect[j] + config.segment_strength * truth.story_vec[j * k];
                    (
                        StoryId(j as u32),
                        appeal + config.editorial_noise * gumbel.sample(&mut srng),
                    )
                })
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            script
                .rankings
                .insert((g, w), scored.into_iter().map(|x| x.0).collect());
        }
    }

    let pe = normalized_exposure(&config.position_effects, config.slate_size)?;
    let reference_value = (0..nu)
        .map(|i| {
            let u = UserId(i as u32);
            let ranking = &script.rankings[&(users[&u].grade, 0)];
            ranking
                .iter()
                .zip(&pe)
                .map(|(s, p)| p * truth.mu(u, *s))
                .sum()
        })
        .collect();
    let activity = ActivityModel {
        active_prob,
        rate,
        other_rate,
        reference_value,
    };
    Ok(World {
        config: config.clone(),
        users,
        stories,
        truth,
        activity,
        script: Arc::new(script),
    })
}
