use super::{LoggedInteraction, OpeError, OutcomePredictor, PropensityModel};
use crate::log::UserId;
use crate::stats::{normal_quantile, sd, two_sided_p};
use crate::{par, seed};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::Write;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrConfig {
    /// Largest tolerated share of logs whose logging propensity was floored.
    pub max_clipped_fraction: f64,
    /// Bootstrap replicates; 0 skips the standard error.
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for DrConfig {
    fn default() -> Self {
        DrConfig {
            max_clipped_fraction: 0.2,
            bootstrap: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrEstimate {
    /// Per-interaction policy value.
    pub value: f64,
    pub std_error: f64,
    pub n_logs: usize,
    pub min_weight: f64,
    pub max_weight: f64,
    /// (Σw)² / Σw² over logs.
    pub effective_sample_size: f64,
    pub clipped_fraction: f64,
    /// Per user: sum of DR terms and number of logs.
    pub per_user: BTreeMap<UserId, (f64, usize)>,
}

impl DrEstimate {
    /// Period total per user, scaling by a mean interaction count.
    pub fn to_total(&self, mean_interactions: f64) -> ScaledEstimate {
        ScaledEstimate {
            value: self.value * mean_interactions,
            std_error: self.std_error * mean_interactions,
            scale: EstimateScale::PerUserTotal,
        }
    }

    pub fn per_interaction(&self) -> ScaledEstimate {
        ScaledEstimate {
            value: self.value,
            std_error: self.std_error,
            scale: EstimateScale::PerInteraction,
        }
    }
}

struct Terms {
    per_user: BTreeMap<UserId, (f64, usize)>,
    weights: Vec<f64>,
    clipped: usize,
}

/// DR terms `w (y − ŷ) + E_π[ŷ]` with `w = ê^π / ê^T`; the target
/// propensity is unfloored and the logging propensity floored.
fn dr_terms(
    logs: &[LoggedInteraction],
    target: &PropensityModel,
    logging: &PropensityModel,
    yhat: &dyn OutcomePredictor,
) -> Terms {
    let mut direct: HashMap<UserId, f64> = HashMap::new();
    let mut per_user: BTreeMap<UserId, (f64, usize)> = BTreeMap::new();
    let mut weights = Vec::with_capacity(logs.len());
    let mut clipped = 0;
    for l in logs {
        let d = *direct.entry(l.user).or_insert_with(|| {
            target
                .support(l.user, l.grade)
                .iter()
                .map(|(s, p)| p * yhat.predict(l.user, *s))
                .sum()
        });
        if logging.is_floored(l.user, l.grade, l.story) {
            clipped += 1;
        }
        let w = target.raw(l.user, l.grade, l.story) / logging.prob(l.user, l.grade, l.story);
        let term = w * (l.y - yhat.predict(l.user, l.story)) + d;
        let e = per_user.entry(l.user).or_insert((0.0, 0));
        e.0 += term;
        e.1 += 1;
        weights.push(w);
    }
    Terms {
        per_user,
        weights,
        clipped,
    }
}

fn ratio(per_user: &BTreeMap<UserId, (f64, usize)>) -> f64 {
    let (s, n) = per_user
        .values()
        .fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    s / n as f64
}

/// Standard deviation of the pooled ratio Σ sums / Σ counts over `b`
/// user-level resamples. Replicate r draws from its own derived seed.
pub fn bootstrap_se(per_user: &[(f64, usize)], b: usize, seed: u64) -> f64 {
    if per_user.is_empty() || b < 2 {
        return f64::NAN;
    }
    let reps = par::map_range(b, |r| {
        let mut rng = seed::rng(seed::derive(seed, &[seed::tag("bootstrap"), r as u64]));
        let (mut s, mut n) = (0.0, 0usize);
        for _ in 0..per_user.len() {
            let (a, c) = per_user[rng.random_range(0..per_user.len())];
            s += a;
            n += c;
        }
        s / n as f64
    });
    sd(&reps)
}

pub fn dr_value(
    logs: &[LoggedInteraction],
    target: &PropensityModel,
    logging: &PropensityModel,
    yhat: &dyn OutcomePredictor,
    cfg: &DrConfig,
) -> Result<DrEstimate, OpeError> {
    if logs.is_empty() {
        return Err(OpeError::NoLogs);
    }
    let t = dr_terms(logs, target, logging, yhat);
    let clipped_fraction = t.clipped as f64 / logs.len() as f64;
    if clipped_fraction > cfg.max_clipped_fraction {
        return Err(OpeError::CoverageViolation {
            fraction: clipped_fraction,
            limit: cfg.max_clipped_fraction,
        });
    }
    let sw: f64 = t.weights.iter().sum();
    let sw2: f64 = t.weights.iter().map(|w| w * w).sum();
    let cells: Vec<(f64, usize)> = t.per_user.values().copied().collect();
    Ok(DrEstimate {
        value: ratio(&t.per_user),
        std_error: if cfg.bootstrap > 0 {
            bootstrap_se(&cells, cfg.bootstrap, cfg.seed)
        } else {
            f64::NAN
        },
        n_logs: logs.len(),
        min_weight: t.weights.iter().copied().fold(f64::INFINITY, f64::min),
        max_weight: t.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        effective_sample_size: if sw2 > 0.0 { sw * sw / sw2 } else { 0.0 },
        clipped_fraction,
        per_user: t.per_user,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy_a: String,
    /// "-" for a single-policy value row.
    pub policy_b: String,
    pub group: String,
    pub estimate: f64,
    pub std_error: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub ess: f64,
    pub clipped_fraction: f64,
}

impl ComparisonRow {
    pub const HEADER: &'static str =
        "policy_A,policy_B,group,estimate,se,ci_lo,ci_hi,ess,clipped_frac";
}

/// DR values of every policy and all pairwise differences, overall and for
/// heavy (`groups[u] == true`) and light users. Differences use paired
/// user-level bootstrap resamples.
pub fn compare_policies(
    logs: &[LoggedInteraction],
    policies: &[(String, &PropensityModel)],
    logging: &PropensityModel,
    yhat: &dyn OutcomePredictor,
    groups: &BTreeMap<UserId, bool>,
    cfg: &DrConfig,
) -> Result<Vec<ComparisonRow>, OpeError> {
    let ests: Vec<DrEstimate> = policies
        .iter()
        .map(|(_, p)| {
            dr_value(
                logs,
                p,
                logging,
                yhat,
                &DrConfig {
                    bootstrap: 0,
                    ..*cfg
                },
            )
        })
        .collect::<Result<_, _>>()?;
    let users: Vec<UserId> = ests[0].per_user.keys().copied().collect();
    let z = normal_quantile(0.975);
    let mut rows = Vec::new();
    for (gname, keep) in [("all", None), ("heavy", Some(true)), ("light", Some(false))] {
        let members: Vec<UserId> = users
            .iter()
            .copied()
            .filter(|u| keep.is_none_or(|k| groups.get(u).copied().unwrap_or(false) == k))
            .collect();
        if members.is_empty() {
            continue;
        }
        let cells: Vec<Vec<(f64, usize)>> = ests
            .iter()
            .map(|e| members.iter().map(|u| e.per_user[u]).collect())
            .collect();
        let point = |c: &[(f64, usize)], idx: &mut dyn Iterator<Item = usize>| {
            let (mut s, mut n) = (0.0, 0);
            for i in idx {
                s += c[i].0;
                n += c[i].1;
            }
            s / n as f64
        };
        let m = members.len();
        let resamples: Vec<Vec<usize>> = par::map_range(cfg.bootstrap, |r| {
            let mut rng = seed::rng(seed::derive(
                cfg.seed,
                &[seed::tag("compare"), seed::tag(gname), r as u64],
            ));
            (0..m).map(|_| rng.random_range(0..m)).collect()
        });
        let boot = |f: &dyn Fn(&[usize]) -> f64| -> f64 {
            if resamples.len() < 2 {
                return f64::NAN;
            }
            sd(&resamples.iter().map(|idx| f(idx)).collect::<Vec<_>>())
        };
        let mut push = |a: usize, b: Option<usize>, est: f64, se: f64| {
            let (ess, clip) = match b {
                Some(b) => (
                    ests[a]
                        .effective_sample_size
                        .min(ests[b].effective_sample_size),
                    ests[a].clipped_fraction.max(ests[b].clipped_fraction),
                ),
                None => (ests[a].effective_sample_size, ests[a].clipped_fraction),
            };
            rows.push(ComparisonRow {
                policy_a: policies[a].0.clone(),
                policy_b: b.map_or("-".into(), |b| policies[b].0.clone()),
                group: gname.into(),
                estimate: est,
                std_error: se,
                ci_lo: est - z * se,
                ci_hi: est + z * se,
                ess,
                clipped_fraction: clip,
            });
        };
        for a in 0..policies.len() {
            let est = point(&cells[a], &mut (0..m));
            let se = boot(&|idx| point(&cells[a], &mut idx.iter().copied()));
            push(a, None, est, se);
        }
        for a in 0..policies.len() {
            for b in a + 1..policies.len() {
                let diff = |idx: &mut dyn Iterator<Item = usize>| {
                    let idx: Vec<usize> = idx.collect();
                    point(&cells[a], &mut idx.iter().copied())
                        - point(&cells[b], &mut idx.iter().copied())
                };
                let est = diff(&mut (0..m));
                let se = boot(&|idx| diff(&mut idx.iter().copied()));
                push(a, Some(b), est, se);
            }
        }
    }
    Ok(rows)
}

pub fn write_comparisons<W: Write>(rows: &[ComparisonRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{}", ComparisonRow::HEADER)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.1},{:.4}",
            r.policy_a,
            r.policy_b,
            r.group,
            r.estimate,
            r.std_error,
            r.ci_lo,
            r.ci_hi,
            r.ess,
            r.clipped_fraction
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimateScale {
    PerInteraction,
    PerUserTotal,
}

impl EstimateScale {
    pub fn name(self) -> &'static str {
        match self {
            EstimateScale::PerInteraction => "per-interaction",
            EstimateScale::PerUserTotal => "per-user total",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledEstimate {
    pub value: f64,
    pub std_error: f64,
    pub scale: EstimateScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    /// On-policy minus off-policy.
    pub difference: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Two-sided z-test of the on-policy estimate against the off-policy one,
/// treating them as independent.
pub fn onpolicy_vs_offpolicy_check(
    rct: &ScaledEstimate,
    dr: &ScaledEstimate,
) -> Result<CheckReport, OpeError> {
    if rct.scale != dr.scale {
        return Err(OpeError::ScaleMismatch(rct.scale.name(), dr.scale.name()));
    }
    let d = rct.value - dr.value;
    let se = rct.std_error.hypot(dr.std_error);
    Ok(CheckReport {
        difference: d,
        std_error: se,
        z: if se > 0.0 { d / se } else { 0.0 },
        p_value: two_sided_p(d, se),
    })
}
