//! Seeded randomness.
//!
//! A single master seed fans out to component seeds by hashing the master
//! seed together with a list of tags through SplitMix64:
//!
//! ```text
//! s = master
//! for tag in tags: s = splitmix64(s ^ splitmix64(tag))
//! ```

use num_traits::Float;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Component tags for [`derive_seed`].
pub mod tag {
    pub const DATA: u64 = 0x6461_7461;
    pub const TRAIN: u64 = 0x7472_6169;
    pub const SEARCH: u64 = 0x7365_6172;
    pub const INIT: u64 = 0x696e_6974;
    pub const RETRAIN: u64 = 0x7265_7472;
    pub const EVAL: u64 = 0x6576_616c;
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(master, |s, &t| splitmix64(s ^ splitmix64(t)))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal draw (Box–Muller).
pub fn standard_normal(rng: &mut Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    Float::sqrt(-2.0 * Float::ln(u1)) * Float::cos(core::f64::consts::TAU * u2)
}

/// Fisher–Yates shuffle.
pub fn shuffle<T>(items: &mut [T], rng: &mut Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}
