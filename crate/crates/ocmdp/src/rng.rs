//! Seed derivation for deterministic, worker-count-independent runs.
//!
//! Every source of randomness in the crate is a ChaCha8 stream seeded from
//! `derive_seed(base, stream)`. Stream ids are assigned by position (episode
//! index, net index, ...), never by worker, so results do not depend on how
//! work is scheduled.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer. Decorrelates nearby (base, stream) pairs.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the seed for stream `stream` of run seed `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream.wrapping_add(1)))
}

/// A ChaCha8 generator for one derived stream.
pub fn stream_rng(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

/// Stream id layout: each episode consumes two streams, one for environment
/// dynamics and one for policy sampling, so observation decisions never
/// perturb dynamics randomness.
pub fn episode_streams(base: u64, episode: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let env = stream_rng(base, 2 * episode);
    let policy = stream_rng(base, 2 * episode + 1);
    (env, policy)
}
