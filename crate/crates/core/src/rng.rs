//! Counter-based seed derivation.
//!
//! Every random stream is keyed by the master seed and a path of integers
//! (replication index, replicate index, ...), so results never depend on the
//! order in which parallel workers pick up tasks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Path tag for bootstrap streams nested in a replication.
pub const TAG_BOOTSTRAP: u64 = 0x626f_6f74; // "boot"
/// Path tag for data-generation streams.
pub const TAG_DATA: u64 = 0x6461_7461; // "data"
/// Path tag for optimizer multistart draws.
pub const TAG_START: u64 = 0x7374_7274; // "strt"

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with a path into a child seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(master: u64, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, path))
}
