//! Deterministic named substreams derived from one root seed.
//!
//! Every randomness consumer (instance generation, rollouts, bandit draws)
//! owns a stream keyed by a label, so editing one consumer's config never
//! shifts another's draws.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

/// FNV-1a over the root seed and label. Stable across platforms and
/// releases, unlike `DefaultHasher`.
pub fn mix(root: u64, label: &str, index: u64) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    for byte in root
        .to_le_bytes()
        .iter()
        .chain(label.as_bytes())
        .chain(index.to_le_bytes().iter())
    {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(PRIME);
    }
    h
}

pub fn stream(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(root, label, 0))
}

/// Indexed variant for per-instance / per-step streams.
pub fn substream(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(root, label, index))
}
