//! Seeded randomness. Every random draw in the crate goes through a
//! [`ChaCha8Rng`] whose seed is derived from the run seed plus a stream
//! label, so results never depend on call order across unrelated streams.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math;

pub type Rng = ChaCha8Rng;

/// Stream labels, mixed into the run seed.
pub mod stream {
    pub const INIT_TEACHER: u64 = 0x7465_6163;
    pub const INIT_STUDENT: u64 = 0x7374_7564;
    pub const SHUFFLE: u64 = 0x7368_7566;
    pub const DROPOUT: u64 = 0x6472_6f70;
    pub const SUBGRAPH: u64 = 0x7375_6267;
    pub const NEGATIVES: u64 = 0x6e65_6761;
    pub const SYNTHETIC: u64 = 0x7379_6e74;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with any number of stream coordinates.
pub fn derive_seed(base: u64, coords: &[u64]) -> u64 {
    coords.iter().fold(splitmix64(base), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived(base: u64, coords: &[u64]) -> Rng {
    seeded(derive_seed(base, coords))
}

/// Standard normal draw (Box-Muller).
pub fn normal(rng: &mut Rng) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u <= f64::MIN_POSITIVE {
            continue;
        }
        let v: f64 = rng.gen();
        return math::sqrt(-2.0 * math::ln(u)) * math::cos(core::f64::consts::TAU * v);
    }
}

/// Normal draw with the given standard deviation, resampled outside two
/// standard deviations.
pub fn truncated_normal(rng: &mut Rng, std: f64) -> f64 {
    loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}
