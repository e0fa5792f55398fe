//! Two-arm experiments and exact policy values.

use super::{simulate_period, PolicyAssignment, SimError, World};
use crate::log::{LogDataset, StoryId, UserId};
use crate::models::{
    eligibility, train, ModelKind, OutcomeModel, SplitSpec, TrainConfig, TuningReport,
};
use crate::policy::{normalized_exposure, rank_stories, top_k, PolicySpec, UserContext};
use crate::seed;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    Control,
    Treatment,
}

impl Arm {
    pub fn is_treated(self) -> bool {
        self == Arm::Treatment
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Control => "control",
            Arm::Treatment => "treatment",
        }
    }

    pub fn parse(s: &str) -> Option<Arm> {
        match s {
            "control" => Some(Arm::Control),
            "treatment" => Some(Arm::Treatment),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArmPolicy {
    Editorial,
    Popularity,
    Personalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub seed: u64,
    /// Days of editorial history before the experiment; a multiple of 7.
    pub pre_days: i32,
    pub duration_days: i32,
    pub assignment_prob: f64,
    /// Pre-period interactions required to enter the experiment.
    pub min_interactions: usize,
    pub treatment: ArmPolicy,
    pub control: ArmPolicy,
    pub train: TrainConfig,
    pub split: SplitSpec,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            seed: 7,
            pre_days: 28,
            duration_days: 14,
            assignment_prob: 0.5,
            min_interactions: 60,
            treatment: ArmPolicy::Personalized,
            control: ArmPolicy::Editorial,
            train: TrainConfig {
                k_grid: vec![4],
                l2_grid: vec![1e-4],
                epochs: 20,
                ..TrainConfig::default()
            },
            split: SplitSpec::default(),
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.pre_days <= 0 || self.pre_days % 7 != 0 || self.duration_days <= 0 {
            return Err(SimError::Config(
                "pre_days must be a positive multiple of 7 and duration_days positive".into(),
            ));
        }
        if !(self.assignment_prob > 0.0 && self.assignment_prob < 1.0) {
            return Err(SimError::Config("assignment_prob must be in (0, 1)".into()));
        }
        self.train.validate()?;
        self.split.validate()?;
        Ok(())
    }

    pub fn start_day(&self) -> i32 {
        self.pre_days
    }

    pub fn end_day(&self) -> i32 {
        self.pre_days + self.duration_days
    }

    /// Deterministic arm for a user.
    pub fn arm_of(&self, u: UserId) -> Arm {
        if seed::unit(self.seed, &[seed::tag("assign"), u.0 as u64]) < self.assignment_prob {
            Arm::Treatment
        } else {
            Arm::Control
        }
    }

    pub fn needs_model(&self) -> Option<ModelKind> {
        let want = |p: ArmPolicy| match p {
            ArmPolicy::Personalized => Some(ModelKind::MatrixFactorization),
            ArmPolicy::Popularity => Some(ModelKind::TwoWayFixedEffects),
            ArmPolicy::Editorial => None,
        };
        want(self.treatment).or(want(self.control))
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub pre: LogDataset,
    pub experiment: LogDataset,
    pub arms: BTreeMap<UserId, Arm>,
    pub model: Option<OutcomeModel>,
    pub tuning: Option<TuningReport>,
}

fn arm_policy(
    world: &World,
    which: ArmPolicy,
    model: Option<&Arc<OutcomeModel>>,
) -> Result<PolicySpec, SimError> {
    let mut spec = match which {
        ArmPolicy::Editorial => PolicySpec::editorial(world.script.clone()),
        ArmPolicy::Popularity => PolicySpec::popularity(
            model
                .cloned()
                .ok_or_else(|| SimError::Config("popularity arm needs a model".into()))?,
        ),
        ArmPolicy::Personalized => PolicySpec::personalized(
            model
                .cloned()
                .ok_or_else(|| SimError::Config("personalized arm needs a model".into()))?,
        ),
    };
    spec.slate_size = world.config.slate_size;
    Ok(spec)
}

/// Editorial pre-period for everyone, a model trained on it when an arm
/// needs one, then the experiment window with each eligible user served by
/// their arm's policy. Ineligible users stay on the editorial policy.
pub fn run_experiment(world: &World, plan: &ExperimentPlan) -> Result<ExperimentRun, SimError> {
    plan.validate()?;
    let editorial = PolicyAssignment::everyone(arm_policy(world, ArmPolicy::Editorial, None)?);
    let pre = simulate_period(
        world,
        &editorial,
        0..plan.pre_days,
        seed::derive(plan.seed, &[seed::tag("pre")]),
    )?;
    let (eligible, _) = eligibility(&pre, plan.min_interactions);
    let arms: BTreeMap<UserId, Arm> = eligible.iter().map(|u| (*u, plan.arm_of(*u))).collect();

    let (model, tuning) = match plan.needs_model() {
        Some(kind) => {
            let mut cfg = plan.train.clone();
            cfg.seed = seed::derive(plan.seed, &[seed::tag("train")]);
            let split = SplitSpec {
                seed: seed::derive(plan.seed, &[seed::tag("split")]),
                ..plan.split
            };
            let (m, rep) = train(kind, &pre, &cfg, &split)?;
            (Some(m), Some(rep))
        }
        None => (None, None),
    };
    let shared = model.clone().map(Arc::new);
    let policies = vec![
        arm_policy(world, ArmPolicy::Editorial, None)?,
        arm_policy(world, plan.control, shared.as_ref())?,
        arm_policy(world, plan.treatment, shared.as_ref())?,
    ];
    let of_user: HashMap<UserId, usize> = arms
        .iter()
        .map(|(u, a)| (*u, if a.is_treated() { 2 } else { 1 }))
        .collect();
    let assignment = PolicyAssignment {
        policies,
        of_user,
        default: 0,
    };
    let experiment = simulate_period(
        world,
        &assignment,
        plan.start_day()..plan.end_day(),
        seed::derive(plan.seed, &[seed::tag("experiment")]),
    )?;
    Ok(ExperimentRun {
        pre,
        experiment,
        arms,
        model,
        tuning,
    })
}

/// Expected per-interaction engagement of a fixed slate:
/// `sum_r p_r * mu(user, slate[r])`.
pub fn slate_value(
    world: &World,
    user: UserId,
    slate: &[StoryId],
    position_effects: &[f64],
) -> Result<f64, SimError> {
    let p = normalized_exposure(position_effects, slate.len())?;
    Ok(slate
        .iter()
        .zip(&p)
        .map(|(s, w)| w * world.truth.mu(user, *s))
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyValue {
    /// Interaction-weighted mean of per-interaction values.
    pub per_interaction: f64,
    /// Mean over users of expected total engagement in the period.
    pub per_user_total: f64,
    pub per_user: BTreeMap<UserId, f64>,
}

/// Exact value of serving each user a fixed slate for `days` days.
pub fn true_value_of_slates(
    world: &World,
    slates: &BTreeMap<UserId, Vec<StoryId>>,
    position_effects: &[f64],
    days: i32,
) -> Result<PolicyValue, SimError> {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut per_user = BTreeMap::new();
    for (u, slate) in slates {
        let v = slate_value(world, *u, slate, position_effects)?;
        let n = world.activity.expected_interactions(*u, days);
        num += n * v;
        den += n;
        per_user.insert(*u, n * v);
    }
    let per_interaction = if den > 0.0 { num / den } else { 0.0 };
    let per_user_total = if slates.is_empty() {
        0.0
    } else {
        num / slates.len() as f64
    };
    Ok(PolicyValue {
        per_interaction,
        per_user_total,
        per_user,
    })
}

/// Exact value of `policy`'s week-`week` top slate over the whole catalog.
pub fn true_policy_value(
    world: &World,
    policy: &PolicySpec,
    users: &[UserId],
    days: i32,
    week: i32,
) -> Result<PolicyValue, SimError> {
    let catalog = world.catalog();
    let mut slates = BTreeMap::new();
    for u in users {
        let ranking = rank_stories(
            policy,
            UserContext {
                user: *u,
                grade: world.grade(*u),
                week,
            },
            &catalog,
        )?;
        slates.insert(*u, top_k(&ranking, policy.slate_size).stories);
    }
    true_value_of_slates(world, &slates, world.position_effects(), days)
}
