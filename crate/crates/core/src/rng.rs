//! Counter-based seeding: every random draw is keyed by
//! `(seed, stream, counter)` so results do not depend on execution order
//! or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Coefficients = 1,
    CovariatesY = 2,
    CovariatesW = 3,
    ResponseY = 4,
    ResponseW = 5,
    Round = 6,
    Bootstrap = 7,
    Split = 8,
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a stream id and counter into a new 64-bit seed.
pub fn derive_seed(seed: u64, stream: u64, counter: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)) ^ counter)
}

pub fn rng_for(seed: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream as u64, counter))
}
