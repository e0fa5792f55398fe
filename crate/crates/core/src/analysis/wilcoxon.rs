//! One-sided Wilcoxon rank-sum test (alternative: treated shifted above
//! control). Ties get midranks.

use super::AnalysisError;
use crate::stats::normal_cdf;
use serde::{Deserialize, Serialize};

/// Largest pooled sample size handled by enumeration in
/// [`wilcoxon_one_sided`].
pub const EXACT_MAX_N: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of the treated midranks.
    pub statistic: f64,
    pub p_value: f64,
    pub exact: bool,
    /// Every value identical; p is set to 0.5 by convention.
    pub fully_tied: bool,
}

/// Doubled midranks (so they are integers) of the pooled sample.
fn doubled_midranks(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 averaged, doubled: (i + 1) + (j + 1)
        for &k in &idx[i..=j] {
            ranks[k] = i + j + 2;
        }
        i = j + 1;
    }
    ranks
}

fn pooled(treated: &[f64], control: &[f64]) -> Result<(Vec<usize>, usize), AnalysisError> {
    if treated.is_empty() || control.is_empty() {
        return Err(AnalysisError::Invalid(
            "rank-sum test needs two non-empty samples".into(),
        ));
    }
    let all: Vec<f64> = treated.iter().chain(control).copied().collect();
    let r = doubled_midranks(&all);
    let w2 = r[..treated.len()].iter().sum();
    Ok((r, w2))
}

fn is_fully_tied(treated: &[f64], control: &[f64]) -> bool {
    let first = treated[0];
    treated.iter().chain(control).all(|v| *v == first)
}

/// Exact P(W ≥ w_obs) under random assignment of the pooled (mid)ranks,
/// counting subsets by dynamic programming over rank sums.
pub fn wilcoxon_exact(treated: &[f64], control: &[f64]) -> Result<WilcoxonResult, AnalysisError> {
    let (ranks, w2) = pooled(treated, control)?;
    let m = treated.len();
    let max_sum: usize = ranks.iter().sum();
    // ways[c][s]: subsets of size c with doubled rank sum s
    let mut ways = vec![vec![0.0f64; max_sum + 1]; m + 1];
    ways[0][0] = 1.0;
    for &r in &ranks {
        for c in (1..=m).rev() {
            let (lo, hi) = ways.split_at_mut(c);
            for s in (r..=max_sum).rev() {
                hi[0][s] += lo[c - 1][s - r];
            }
        }
    }
    let total: f64 = ways[m].iter().sum();
    let upper: f64 = ways[m][w2..].iter().sum();
    let fully_tied = is_fully_tied(treated, control);
    Ok(WilcoxonResult {
        statistic: w2 as f64 / 2.0,
        p_value: if fully_tied {
            0.5
        } else {
            (upper / total).min(1.0)
        },
        exact: true,
        fully_tied,
    })
}

/// Normal approximation with tie-corrected variance and a continuity
/// correction of one half.
pub fn wilcoxon_normal(treated: &[f64], control: &[f64]) -> Result<WilcoxonResult, AnalysisError> {
    let (ranks, w2) = pooled(treated, control)?;
    let (m, n) = (treated.len() as f64, control.len() as f64);
    let big_n = m + n;
    let w = w2 as f64 / 2.0;
    let mut tie_sizes = std::collections::BTreeMap::new();
    for r in &ranks {
        *tie_sizes.entry(*r).or_insert(0.0f64) += 1.0;
    }
    let ties: f64 = tie_sizes.values().map(|t| t * t * t - t).sum();
    let var = m * n / 12.0 * ((big_n + 1.0) - ties / (big_n * (big_n - 1.0)));
    let fully_tied = is_fully_tied(treated, control) || var <= 0.0;
    let p = if fully_tied {
        0.5
    } else {
        let z = (w - m * (big_n + 1.0) / 2.0 - 0.5) / var.sqrt();
        1.0 - normal_cdf(z)
    };
    Ok(WilcoxonResult {
        statistic: w,
        p_value: p.clamp(0.0, 1.0),
        exact: false,
        fully_tied,
    })
}

/// Exact when the pooled size is at most [`EXACT_MAX_N`], normal otherwise.
pub fn wilcoxon_one_sided(
    treated: &[f64],
    control: &[f64],
) -> Result<WilcoxonResult, AnalysisError> {
    if treated.len() + control.len() <= EXACT_MAX_N {
        wilcoxon_exact(treated, control)
    } else {
        wilcoxon_normal(treated, control)
    }
}
