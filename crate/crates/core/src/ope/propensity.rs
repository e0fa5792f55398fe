use super::LoggedInteraction;
use crate::log::{StoryId, UserId};
use crate::policy::{
    exposure_distribution, rank_stories, top_k, PolicyError, PolicySpec, UserContext,
};
use std::collections::BTreeMap;
use std::io::Write;

pub const DEFAULT_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub enum PropensityKind {
    /// Per-grade story frequencies among logged interactions; grades never
    /// seen fall back to uniform over `catalog`.
    Editorial {
        by_grade: BTreeMap<u8, BTreeMap<StoryId, f64>>,
        catalog: Vec<StoryId>,
    },
    /// Per-user exposure distribution of a fixed top-K slate.
    TopK {
        by_user: BTreeMap<UserId, BTreeMap<StoryId, f64>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModel {
    pub kind: PropensityKind,
    pub floor: f64,
}

impl PropensityModel {
    /// Unfloored probability; zero outside the model's support.
    pub fn raw(&self, user: UserId, grade: u8, story: StoryId) -> f64 {
        match &self.kind {
            PropensityKind::Editorial { by_grade, catalog } => match by_grade.get(&grade) {
                Some(m) => m.get(&story).copied().unwrap_or(0.0),
                None if catalog.binary_search(&story).is_ok() => 1.0 / catalog.len() as f64,
                None => 0.0,
            },
            PropensityKind::TopK { by_user } => by_user
                .get(&user)
                .and_then(|m| m.get(&story))
                .copied()
                .unwrap_or(0.0),
        }
    }

    /// Probability clipped to `[floor, 1]`.
    pub fn prob(&self, user: UserId, grade: u8, story: StoryId) -> f64 {
        self.raw(user, grade, story).clamp(self.floor, 1.0)
    }

    pub fn is_floored(&self, user: UserId, grade: u8, story: StoryId) -> bool {
        self.raw(user, grade, story) < self.floor
    }

    /// Stories with positive raw probability, with their probabilities.
    pub fn support(&self, user: UserId, grade: u8) -> Vec<(StoryId, f64)> {
        match &self.kind {
            PropensityKind::Editorial { by_grade, catalog } => match by_grade.get(&grade) {
                Some(m) => m.iter().map(|(s, p)| (*s, *p)).collect(),
                None => catalog
                    .iter()
                    .map(|s| (*s, 1.0 / catalog.len() as f64))
                    .collect(),
            },
            PropensityKind::TopK { by_user } => by_user
                .get(&user)
                .map(|m| m.iter().map(|(s, p)| (*s, *p)).collect())
                .unwrap_or_default(),
        }
    }

    /// For an editorial model: whether `grade` was seen in the logs.
    pub fn covers_grade(&self, grade: u8) -> bool {
        match &self.kind {
            PropensityKind::Editorial { by_grade, .. } => by_grade.contains_key(&grade),
            PropensityKind::TopK { .. } => true,
        }
    }

    /// Stories whose unfloored probability for `grade` reaches `min_prob`.
    pub fn supported_stories(&self, grade: u8, min_prob: f64) -> Vec<StoryId> {
        self.support(UserId(u32::MAX), grade)
            .into_iter()
            .filter(|(_, p)| *p >= min_prob)
            .map(|(s, _)| s)
            .collect()
    }
}

/// Empirical story frequencies per grade over logged interactions.
pub fn editorial_propensity(
    logs: &[LoggedInteraction],
    catalog: &[StoryId],
    floor: f64,
) -> PropensityModel {
    let mut counts: BTreeMap<u8, BTreeMap<StoryId, f64>> = BTreeMap::new();
    for l in logs {
        *counts
            .entry(l.grade)
            .or_default()
            .entry(l.story)
            .or_insert(0.0) += 1.0;
    }
    for m in counts.values_mut() {
        let total: f64 = m.values().sum();
        m.values_mut().for_each(|v| *v /= total);
    }
    let mut catalog = catalog.to_vec();
    catalog.sort();
    catalog.dedup();
    PropensityModel {
        kind: PropensityKind::Editorial {
            by_grade: counts,
            catalog,
        },
        floor,
    }
}

/// Exposure distribution of each user's slate under `position_effects`.
pub fn topk_propensity(
    slates: &BTreeMap<UserId, Vec<StoryId>>,
    position_effects: &[f64],
    floor: f64,
) -> Result<PropensityModel, PolicyError> {
    let mut by_user = BTreeMap::new();
    for (u, s) in slates {
        if !s.is_empty() {
            by_user.insert(*u, exposure_distribution(s, position_effects)?);
        }
    }
    Ok(PropensityModel {
        kind: PropensityKind::TopK { by_user },
        floor,
    })
}

/// Top-`policy.slate_size` slate per user, ranking only the stories
/// `candidates` returns for the user's grade.
pub fn target_slates<F: Fn(u8) -> Vec<StoryId>>(
    policy: &PolicySpec,
    users: &[(UserId, u8)],
    week: i32,
    candidates: F,
) -> Result<BTreeMap<UserId, Vec<StoryId>>, PolicyError> {
    let mut cache: BTreeMap<u8, Vec<StoryId>> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for &(user, grade) in users {
        let c = cache.entry(grade).or_insert_with(|| candidates(grade));
        let ranking = rank_stories(policy, UserContext { user, grade, week }, c)?;
        out.insert(user, top_k(&ranking, policy.slate_size).stories);
    }
    Ok(out)
}

/// `grade,story_id,probability` for editorial models and
/// `user_id,story_id,probability` for top-K models.
pub fn write_propensities<W: Write>(m: &PropensityModel, w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    match &m.kind {
        PropensityKind::Editorial { by_grade, .. } => {
            out.write_record(["grade", "story_id", "probability"])?;
            for (g, row) in by_grade {
                for (s, p) in row {
                    out.write_record([g.to_string(), s.0.to_string(), p.to_string()])?;
                }
            }
        }
        PropensityKind::TopK { by_user } => {
            out.write_record(["user_id", "story_id", "probability"])?;
            for (u, row) in by_user {
                for (s, p) in row {
                    out.write_record([u.0.to_string(), s.0.to_string(), p.to_string()])?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log::Section;
    use crate::policy::normalized_exposure;
    use crate::sim::{make_world, simulate_period, PolicyAssignment, WorldConfig};

    fn log(user: u32, grade: u8, story: u32) -> LoggedInteraction {
        LoggedInteraction {
            user: UserId(user),
            grade,
            story: StoryId(story),
            y: 0.5,
        }
    }

    #[test]
    fn grade_frequencies() {
        let logs = [log(0, 1, 5), log(1, 1, 5), log(0, 1, 6), log(2, 1, 7)];
        let cat: Vec<StoryId> = (5..10).map(StoryId).collect();
        let m = editorial_propensity(&logs, &cat, 1e-3);
        assert_eq!(m.raw(UserId(9), 1, StoryId(5)), 0.5);
        assert_eq!(m.prob(UserId(9), 1, StoryId(9)), 1e-3);
        assert!(m.is_floored(UserId(9), 1, StoryId(9)));
        assert!(!m.covers_grade(3));
        assert_eq!(m.raw(UserId(0), 3, StoryId(8)), 0.2);
        let mass: f64 = m.support(UserId(0), 1).iter().map(|x| x.1).sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn topk_mass_and_floor() {
        let slates = BTreeMap::from([(UserId(1), (0..15).map(StoryId).collect::<Vec<_>>())]);
        let m = topk_propensity(&slates, &[1.0; 15], 1e-3).unwrap();
        assert!((m.raw(UserId(1), 1, StoryId(3)) - 1.0 / 15.0).abs() < 1e-15);
        assert_eq!(m.prob(UserId(1), 1, StoryId(99)), 1e-3);
        let geo: Vec<f64> = (0..15).map(|r| 0.7f64.powi(r)).collect();
        let m = topk_propensity(&slates, &geo, 1e-3).unwrap();
        let mass: f64 = m.support(UserId(1), 1).iter().map(|x| x.1).sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn table_export() {
        let m = editorial_propensity(&[log(0, 2, 1)], &[StoryId(1)], 1e-3);
        let mut buf = Vec::new();
        write_propensities(&m, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "grade,story_id,probability\n2,1,1\n"
        );
    }

    #[test]
    fn editorial_frequencies_match_static_exposure() {
        // static weekly slates: the grade's exposure is the week-average of
        // the normalized position effects over the scripted top 15
        let cfg = WorldConfig {
            n_users: 3000,
            grades: vec![3],
            slate_dynamics: false,
            ..Default::default()
        };
        let w = make_world(&cfg).unwrap();
        let d = simulate_period(
            &w,
            &PolicyAssignment::everyone(PolicySpec::editorial(w.script.clone())),
            0..28,
            11,
        )
        .unwrap();
        let logs = super::super::logged_interactions(&d, &Section::Recommended);
        assert!(logs.len() >= 100_000);
        let m = editorial_propensity(&logs, &w.catalog(), 1e-3);
        let pe = normalized_exposure(w.position_effects(), 15).unwrap();
        let mut truth: BTreeMap<StoryId, f64> = BTreeMap::new();
        for week in 0..4 {
            let ranking = w.script.ranking(3, week).unwrap();
            for (r, s) in ranking.iter().take(15).enumerate() {
                *truth.entry(*s).or_insert(0.0) += pe[r] / 4.0;
            }
        }
        let err = w
            .catalog()
            .iter()
            .map(|s| (m.raw(UserId(0), 3, *s) - truth.get(s).copied().unwrap_or(0.0)).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.02, "max error {err}");
    }
}
