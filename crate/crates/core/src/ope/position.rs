use crate::log::{LogDataset, Section, MAX_SLATE_RANK};
use crate::stats::isotonic_decreasing;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionEffects {
    /// Probability that an interaction lands on rank r + 1.
    pub values: Vec<f64>,
    /// Ranks with no interaction; they were given the floor mass.
    pub unobserved: Vec<u8>,
    pub smoothed: bool,
}

/// Share of `section` interactions at each slate rank, normalized. Unobserved
/// ranks get `floor` before renormalizing; `smooth` applies a non-increasing
/// isotonic fit first.
pub fn estimate_position_effects(
    data: &LogDataset,
    section: &Section,
    floor: f64,
    smooth: bool,
) -> PositionEffects {
    let n = MAX_SLATE_RANK as usize;
    let mut counts = vec![0.0; n];
    for r in data
        .records()
        .iter()
        .filter(|r| &r.section == section && r.outcome.is_interaction())
    {
        if let Some(rank) = r.slate_rank {
            counts[rank as usize - 1] += 1.0;
        }
    }
    let unobserved: Vec<u8> = (0..n)
        .filter(|&i| counts[i] == 0.0)
        .map(|i| i as u8 + 1)
        .collect();
    let total: f64 = counts.iter().sum();
    let mut v: Vec<f64> = if total > 0.0 {
        counts.iter().map(|c| c / total).collect()
    } else {
        vec![0.0; n]
    };
    if smooth {
        v = isotonic_decreasing(&v);
    }
    for x in v.iter_mut() {
        if *x <= 0.0 {
            *x = floor;
        }
    }
    let s: f64 = v.iter().sum();
    PositionEffects {
        values: v.iter().map(|x| x / s).collect(),
        unobserved,
        smoothed: smooth,
    }
}
