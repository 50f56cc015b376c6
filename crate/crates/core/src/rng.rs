//! Seeded, counter-based random streams.
//!
//! Every consumer of randomness asks for a substream keyed by
//! `(seed, domain, index)`. The ChaCha8 key is derived from `seed` and
//! `domain` with SplitMix64, and `index` selects the ChaCha stream, so the
//! draws for camera 7 never depend on how many draws camera 3 consumed or on
//! which thread ran first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Substream domains. Values are arbitrary but fixed forever: changing one
/// changes every seeded output in that domain.
pub mod domain {
    pub const EPOCH_SHUFFLE: u64 = 0x01;
    pub const CAMERA_PERTURB: u64 = 0x02;
    pub const DENSIFY_SPLIT: u64 = 0x03;
    pub const SYNTH_DETAIL: u64 = 0x04;
    pub const SYNTH_REGEN: u64 = 0x05;
    pub const CONCENTRATION: u64 = 0x06;
    pub const NOISE_AVERAGING: u64 = 0x07;
    pub const SCENE_SYNTH: u64 = 0x08;
    pub const INIT: u64 = 0x09;
    pub const VERIFY: u64 = 0x0a;
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes several words into one seed.
pub fn mix(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x6a09_e667_f3bc_c908, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

pub fn substream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, domain]));
    rng.set_stream(index);
    rng
}
