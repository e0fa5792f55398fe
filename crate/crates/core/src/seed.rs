//! Stable seed derivation. Every random stream in the crate is keyed by a
//! root seed plus a list of tags (stage, user id, week, replicate), so the
//! same inputs reproduce the same draws regardless of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(root: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(root), |acc, &t| mix(acc ^ mix(t)))
}

/// Hash a stage name into a tag.
pub fn tag(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw in [0, 1) that depends only on the inputs.
pub fn unit(root: u64, tags: &[u64]) -> f64 {
    (derive(root, tags) >> 11) as f64 / (1u64 << 53) as f64
}
