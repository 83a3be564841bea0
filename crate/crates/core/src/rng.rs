//! Seeded random streams.
//!
//! Every stochastic quantity in the crate is drawn from a ChaCha8 stream
//! addressed by `(seed, stream)`. ChaCha is counter based, so stream `b`
//! can be opened directly without generating streams `0..b`, which is what
//! makes the parallel bootstrap independent of the thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

/// Opens stream `stream` of the generator keyed by `seed`.
pub fn substream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives an independent 64-bit seed from a parent seed and a tag
/// (SplitMix64 finalizer over the combined words).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The `len` standard normal multipliers used by bootstrap replicate
/// `replicate` under `seed`.
pub fn multipliers(seed: u64, replicate: u64, len: usize) -> Vec<f64> {
    let mut rng = substream(seed, replicate);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}
