//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from the
//! top-level seed and a path of indices (e.g. `[item, hypothesis]`) mixed
//! through SplitMix64. Streams for different paths are independent, so work
//! can be split across threads without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Domain tags keep streams used for different purposes apart.
pub mod domain {
    pub const TRAIN: u64 = 0x7472_6169_6e00_0001;
    pub const INIT: u64 = 0x696e_6974_0000_0002;
    pub const SAMPLE: u64 = 0x7361_6d70_6c65_0003;
    pub const SYNTH: u64 = 0x7379_6e74_6800_0004;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &ix| splitmix64(acc ^ splitmix64(ix)))
}

pub fn substream(seed: u64, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, path))
}
