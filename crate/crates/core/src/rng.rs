//! Deterministic seeding helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// 64-bit FNV-1a hash, stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed for work on one story: `seed ^ fnv1a(story_id)`.
pub fn story_seed(seed: u64, story_id: &str) -> u64 {
    seed ^ fnv1a(story_id.as_bytes())
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
