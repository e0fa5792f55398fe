//! Outcome draws with a known mean.
//!
//! The funnel is a cascade with one conditional probability `q` at every
//! step: view with probability q, start given view with q, complete given
//! start with q. The expected engagement value is
//! `0.3 q + 0.2 q^2 + 0.5 q^3`, strictly increasing from 0 at q = 0 to 1 at
//! q = 1, so every target mean in [0, 1] has exactly one q.

use crate::log::OutcomeKind;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeDraw {
    pub q: f64,
}

/// Expected engagement of the cascade at conditional probability `q`.
pub fn cascade_mean(q: f64) -> f64 {
    0.3 * q + 0.2 * q * q + 0.5 * q * q * q
}

impl OutcomeDraw {
    /// The cascade whose expected engagement equals `mu` (clamped to [0, 1]).
    pub fn for_mean(mu: f64) -> Self {
        let mu = mu.clamp(0.0, 1.0);
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if cascade_mean(mid) < mu {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        OutcomeDraw { q: 0.5 * (lo + hi) }
    }

    /// Probabilities of (Completed, Started, Viewed, Skipped).
    pub fn probabilities(&self) -> [f64; 4] {
        let q = self.q;
        [q * q * q, q * q * (1.0 - q), q * (1.0 - q), 1.0 - q]
    }

    pub fn mean(&self) -> f64 {
        cascade_mean(self.q)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> OutcomeKind {
        if !rng.random_bool(self.q) {
            OutcomeKind::Skipped
        } else if !rng.random_bool(self.q) {
            OutcomeKind::Viewed
        } else if !rng.random_bool(self.q) {
            OutcomeKind::Started
        } else {
            OutcomeKind::Completed
        }
    }
}
