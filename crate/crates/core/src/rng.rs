//! Seeded random streams.
//!
//! Every random quantity in the lab comes from a ChaCha stream addressed by
//! `(seed, stream)`. Claims, shuffles, weight initialisation and dropout masks
//! each get their own stream so that work can be split across threads
//! without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// Independent stream `stream` of generator `seed`.
pub fn stream(seed: u64, stream: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed from a parent seed and a label (FNV-1a over the label,
/// mixed with splitmix64).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
