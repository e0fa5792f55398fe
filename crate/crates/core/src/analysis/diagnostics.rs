//! Descriptive diagnostics: engagement by interaction order, session
//! lengths, popularity buckets, exposure by user type, covariate balance and
//! the minimum detectable effect.

use super::{covariate_row, AnalysisError};
use crate::log::{LogDataset, Section, StoryId, UserCovariates, UserId, UserProfile};
use crate::sim::Arm;
use crate::stats::{mean, normal_quantile, ols_hc2, sd, two_sided_p, welch_t_p};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankMean {
    pub arm: Arm,
    pub rank: usize,
    pub mean: f64,
    pub std_error: f64,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

/// Mean engagement of the r-th scored `section` interaction of each
/// user-day, per arm, with normal 95% intervals. Rank is interaction order,
/// not slate position.
pub fn mean_engagement_by_rank(
    data: &LogDataset,
    arms: &BTreeMap<UserId, Arm>,
    section: &Section,
) -> Vec<RankMean> {
    let mut cells: BTreeMap<(Arm, usize), Vec<f64>> = BTreeMap::new();
    let mut seen: HashMap<(UserId, i32), usize> = HashMap::new();
    for r in data.records().iter().filter(|r| &r.section == section) {
        let (Some(y), Some(arm)) = (r.value(), arms.get(&r.user_id)) else {
            continue;
        };
        let k = seen.entry((r.user_id, r.day)).or_insert(0);
        *k += 1;
        cells.entry((*arm, *k)).or_default().push(y);
    }
    let z = normal_quantile(0.975);
    cells
        .into_iter()
        .map(|((arm, rank), ys)| {
            let m = mean(&ys);
            let se = sd(&ys) / (ys.len() as f64).sqrt();
            RankMean {
                arm,
                rank,
                mean: m,
                std_error: se,
                lo: m - z * se,
                hi: m + z * se,
                n: ys.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHistogram {
    pub arm: Arm,
    /// Session length → number of sessions.
    pub counts: BTreeMap<usize, usize>,
}

impl SessionHistogram {
    pub fn sessions(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn frequency(&self, len: usize) -> f64 {
        let n = self.sessions();
        if n == 0 {
            return 0.0;
        }
        self.counts.get(&len).copied().unwrap_or(0) as f64 / n as f64
    }

    pub fn cdf(&self, len: usize) -> f64 {
        let n = self.sessions();
        if n == 0 {
            return 0.0;
        }
        self.counts.range(..=len).map(|(_, c)| *c).sum::<usize>() as f64 / n as f64
    }

    pub fn mean(&self) -> f64 {
        let n = self.sessions();
        self.counts
            .iter()
            .map(|(l, c)| (*l * *c) as f64)
            .sum::<f64>()
            / n as f64
    }
}

/// Largest gap `F_b(k) − F_a(k)`; positive when `a` puts more mass on long
/// sessions somewhere in the support.
pub fn dominance_statistic(a: &SessionHistogram, b: &SessionHistogram) -> f64 {
    let max = a
        .counts
        .keys()
        .chain(b.counts.keys())
        .max()
        .copied()
        .unwrap_or(0);
    (1..=max)
        .map(|k| b.cdf(k) - a.cdf(k))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Interactions per `section` session, per arm. Sessions are keyed by
/// (user, day, session id); NotShown rows do not count and sessions with no
/// interaction are omitted.
pub fn session_length_distribution(
    data: &LogDataset,
    arms: &BTreeMap<UserId, Arm>,
    section: &Section,
) -> Vec<SessionHistogram> {
    let mut lens: BTreeMap<(UserId, i32, u32), usize> = BTreeMap::new();
    for r in data
        .records()
        .iter()
        .filter(|r| &r.section == section && r.outcome.is_interaction())
    {
        if arms.contains_key(&r.user_id) {
            *lens.entry((r.user_id, r.day, r.session_id)).or_insert(0) += 1;
        }
    }
    let mut out: Vec<SessionHistogram> = [Arm::Control, Arm::Treatment]
        .into_iter()
        .map(|arm| SessionHistogram {
            arm,
            counts: BTreeMap::new(),
        })
        .collect();
    for ((u, _, _), n) in lens {
        let i = arms[&u].is_treated() as usize;
        *out[i].counts.entry(n).or_insert(0) += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    /// 0 holds the most-shown stories.
    pub bucket: usize,
    pub stories: Vec<StoryId>,
    pub treatment_impressions: usize,
    pub control_mean: f64,
    pub treatment_mean: f64,
    pub diff: f64,
    pub std_error: f64,
    pub p_value: f64,
    pub n_records: usize,
}

/// Split stories into `n_buckets` groups with roughly equal treatment-arm
/// impressions: stories sorted by impressions (descending, ties by id) are
/// cut greedily at each multiple of total/n. Stories without treatment
/// impressions join the last bucket.
pub fn impression_buckets(
    impressions: &BTreeMap<StoryId, usize>,
    catalog: &[StoryId],
    n_buckets: usize,
) -> Vec<Vec<StoryId>> {
    let mut shown: Vec<(StoryId, usize)> = catalog
        .iter()
        .map(|s| (*s, impressions.get(s).copied().unwrap_or(0)))
        .collect();
    shown.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let total: usize = shown.iter().map(|x| x.1).sum();
    let target = total as f64 / n_buckets as f64;
    let mut buckets = vec![Vec::new(); n_buckets];
    let (mut b, mut cum) = (0, 0usize);
    for (s, n) in shown {
        if n == 0 {
            buckets[n_buckets - 1].push(s);
            continue;
        }
        buckets[b].push(s);
        cum += n;
        if b + 1 < n_buckets && cum as f64 >= target * (b + 1) as f64 {
            b += 1;
        }
    }
    buckets
}

/// Per-bucket engagement means by arm, adjusted for grade, channel and past
/// engagement. Covariates are centered within the bucket so the intercept is
/// the adjusted control mean; standard errors are HC2 at record level.
pub fn bucket_engagement_analysis(
    data: &LogDataset,
    arms: &BTreeMap<UserId, Arm>,
    section: &Section,
    n_buckets: usize,
    covariates: &BTreeMap<UserId, UserCovariates>,
) -> Result<Vec<BucketRow>, AnalysisError> {
    if n_buckets == 0 {
        return Err(AnalysisError::Invalid("need at least one bucket".into()));
    }
    let in_scope: Vec<_> = data
        .records()
        .iter()
        .filter(|r| &r.section == section && arms.contains_key(&r.user_id))
        .collect();
    let mut impressions = BTreeMap::new();
    for r in &in_scope {
        if arms[&r.user_id].is_treated() {
            *impressions.entry(r.story_id).or_insert(0) += 1;
        }
    }
    let catalog: Vec<StoryId> = data.stories.keys().copied().collect();
    let buckets = impression_buckets(&impressions, &catalog, n_buckets);
    let bucket_of: HashMap<StoryId, usize> = buckets
        .iter()
        .enumerate()
        .flat_map(|(b, ss)| ss.iter().map(move |s| (*s, b)))
        .collect();

    let mut grades: Vec<u8> = data.users.values().map(|p| p.grade).collect();
    grades.sort_unstable();
    grades.dedup();
    let empty = UserCovariates::default();
    let user_x: HashMap<UserId, Vec<f64>> = arms
        .keys()
        .filter_map(|u| data.users.get(u).map(|p| (*u, p)))
        .map(|(u, p)| {
            let (mut x, _) = covariate_row(p, covariates.get(&u).unwrap_or(&empty), &grades);
            x.truncate(x.len() - 2); // drop niche and section-usage terms
            (u, x)
        })
        .collect();

    let mut per_bucket: Vec<(Vec<f64>, Vec<bool>, Vec<&Vec<f64>>)> =
        vec![(Vec::new(), Vec::new(), Vec::new()); n_buckets];
    for r in &in_scope {
        let (Some(y), Some(x)) = (r.value(), user_x.get(&r.user_id)) else {
            continue;
        };
        let b = bucket_of[&r.story_id];
        per_bucket[b].0.push(y);
        per_bucket[b].1.push(arms[&r.user_id].is_treated());
        per_bucket[b].2.push(x);
    }
    let mut out = Vec::with_capacity(n_buckets);
    for (b, (y, a, xs)) in per_bucket.into_iter().enumerate() {
        let treatment_impressions = buckets[b]
            .iter()
            .map(|s| impressions.get(s).copied().unwrap_or(0))
            .sum();
        let n = y.len();
        let mut row = BucketRow {
            bucket: b,
            stories: buckets[b].clone(),
            treatment_impressions,
            control_mean: f64::NAN,
            treatment_mean: f64::NAN,
            diff: f64::NAN,
            std_error: f64::NAN,
            p_value: f64::NAN,
            n_records: n,
        };
        if n > 0 {
            let p = xs[0].len();
            let means: Vec<f64> = (0..p)
                .map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n as f64)
                .collect();
            let keep: Vec<usize> = (0..p)
                .filter(|&j| xs.iter().any(|x| x[j] != xs[0][j]))
                .collect();
            let design = DMatrix::from_fn(n, 2 + keep.len(), |i, j| match j {
                0 => 1.0,
                1 => a[i] as u8 as f64,
                _ => xs[i][keep[j - 2]] - means[keep[j - 2]],
            });
            if let Ok(fit) = ols_hc2(&design, &y) {
                row.control_mean = fit.coef[0];
                row.treatment_mean = fit.coef[0] + fit.coef[1];
                row.diff = fit.coef[1];
                row.std_error = fit.se[1];
                row.p_value = two_sided_p(fit.coef[1], fit.se[1]);
            }
        }
        out.push(row);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityRow {
    pub arm: Arm,
    pub niche_mean_rank: f64,
    pub non_niche_mean_rank: f64,
    pub niche_mean_percentile: f64,
    pub non_niche_mean_percentile: f64,
    /// Niche minus non-niche mean rank.
    pub difference: f64,
    pub p_value: f64,
    pub n_niche: usize,
    pub n_non_niche: usize,
    /// Fewer than two stories were shown, so ranks carry no information.
    pub degenerate: bool,
}

/// Popularity rank of the stories each user was shown (1 = most impressions
/// across both arms, ties by id), averaged per user and compared between
/// niche and non-niche users within each arm.
pub fn story_popularity_exposure(
    data: &LogDataset,
    arms: &BTreeMap<UserId, Arm>,
    section: &Section,
    covariates: &BTreeMap<UserId, UserCovariates>,
) -> Vec<PopularityRow> {
    let in_scope: Vec<_> = data
        .records()
        .iter()
        .filter(|r| &r.section == section && arms.contains_key(&r.user_id))
        .collect();
    let mut counts: BTreeMap<StoryId, usize> = BTreeMap::new();
    for r in &in_scope {
        *counts.entry(r.story_id).or_insert(0) += 1;
    }
    let mut order: Vec<(StoryId, usize)> = counts.into_iter().collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let n_shown = order.len();
    let rank: HashMap<StoryId, usize> = order
        .iter()
        .enumerate()
        .map(|(i, (s, _))| (*s, i + 1))
        .collect();

    let mut per_user: BTreeMap<UserId, (f64, usize)> = BTreeMap::new();
    for r in &in_scope {
        let e = per_user.entry(r.user_id).or_insert((0.0, 0));
        e.0 += rank[&r.story_id] as f64;
        e.1 += 1;
    }
    let mut out = Vec::new();
    for arm in [Arm::Control, Arm::Treatment] {
        let (mut niche, mut other) = (Vec::new(), Vec::new());
        for (u, (sum, n)) in &per_user {
            if arms[u] != arm {
                continue;
            }
            let m = sum / *n as f64;
            if covariates.get(u).is_some_and(|c| c.is_niche) {
                niche.push(m)
            } else {
                other.push(m)
            }
        }
        let pct = |v: &[f64]| mean(v) / n_shown as f64 * 100.0;
        let p = if niche.len() >= 2 && other.len() >= 2 {
            welch_t_p(&niche, &other)
        } else {
            f64::NAN
        };
        out.push(PopularityRow {
            arm,
            niche_mean_rank: mean(&niche),
            non_niche_mean_rank: mean(&other),
            niche_mean_percentile: pct(&niche),
            non_niche_mean_percentile: pct(&other),
            difference: mean(&niche) - mean(&other),
            p_value: p,
            n_niche: niche.len(),
            n_non_niche: other.len(),
            degenerate: n_shown < 2,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub covariate: String,
    pub mean_treatment: f64,
    pub mean_control: f64,
    pub sd_treatment: f64,
    pub sd_control: f64,
    pub p_value: f64,
}

/// Arm means, standard deviations and Welch p-values for every adjustment
/// covariate plus the remaining pre-period summaries.
pub fn balance_table(
    profiles: &BTreeMap<UserId, UserProfile>,
    covariates: &BTreeMap<UserId, UserCovariates>,
    arms: &BTreeMap<UserId, Arm>,
) -> Result<Vec<BalanceRow>, AnalysisError> {
    let mut grades: Vec<u8> = arms
        .keys()
        .filter_map(|u| profiles.get(u))
        .map(|p| p.grade)
        .collect();
    grades.sort_unstable();
    grades.dedup();
    let empty = UserCovariates::default();
    let mut names = Vec::new();
    let mut cols: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for (u, arm) in arms {
        let Some(p) = profiles.get(u) else { continue };
        let c = covariates.get(u).unwrap_or(&empty);
        let (mut x, mut n) = covariate_row(p, c, &grades);
        x.extend([
            c.past_stories_completed as f64,
            c.past_interactions as f64,
            c.max_streak as f64,
            c.is_heavy_engagement as u8 as f64,
            c.is_heavy_completion as u8 as f64,
        ]);
        n.extend(
            [
                "past_completions",
                "past_interactions",
                "max_streak",
                "heavy_engagement",
                "heavy_completion",
            ]
            .map(String::from),
        );
        if cols.is_empty() {
            cols = vec![(Vec::new(), Vec::new()); x.len()];
            names = n;
        }
        for (j, v) in x.into_iter().enumerate() {
            if arm.is_treated() {
                cols[j].0.push(v)
            } else {
                cols[j].1.push(v)
            }
        }
    }
    let (n_t, n_c) = cols.first().map_or((0, 0), |c| (c.0.len(), c.1.len()));
    if n_t < 2 {
        return Err(AnalysisError::DegenerateArm {
            arm: "treatment",
            n: n_t,
        });
    }
    if n_c < 2 {
        return Err(AnalysisError::DegenerateArm {
            arm: "control",
            n: n_c,
        });
    }
    Ok(names
        .into_iter()
        .zip(cols)
        .map(|(name, (t, c))| BalanceRow {
            covariate: name,
            mean_treatment: mean(&t),
            mean_control: mean(&c),
            sd_treatment: sd(&t),
            sd_control: sd(&c),
            p_value: welch_t_p(&t, &c),
        })
        .collect())
}

/// Minimum detectable effect of a two-sided level-`alpha` test with the
/// given power.
pub fn mde(outcome_sd: f64, n_t: usize, n_c: usize, alpha: f64, power: f64) -> f64 {
    (normal_quantile(1.0 - alpha / 2.0) + normal_quantile(power))
        * outcome_sd
        * (1.0 / n_t as f64 + 1.0 / n_c as f64).sqrt()
}
