//! Keyed random substreams.
//!
//! Every consumer of randomness (the truth simulation, each particle in each
//! window, each resampling event) gets its own generator derived from the
//! root seed and a path of integer keys, so results do not depend on the
//! order in which particles are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const TRUTH: u64 = 1;
pub const INITIAL: u64 = 2;
pub const PARTICLE_NOISE: u64 = 3;
pub const RESAMPLE: u64 = 4;
pub const TRIAL: u64 = 5;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `keys` into `seed`.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn substream(seed: u64, keys: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, keys))
}
