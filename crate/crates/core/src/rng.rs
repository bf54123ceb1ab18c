//! Seed derivation and sampling helpers.
//!
//! Every random stream in a run is derived from the master seed by mixing in
//! integer keys (replication, player, purpose, iteration, probe). Streams are
//! therefore independent of scheduling order, and parallel and serial player
//! loops consume identical draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::Vector;

/// Stream purposes used when keying per-player generators.
pub mod purpose {
    pub const ORACLE: u64 = 1;
    pub const SMOOTHING: u64 = 2;
    pub const LOWER_LEVEL: u64 = 3;
    pub const INSTANCE: u64 = 4;
    pub const GRAPH: u64 = 5;
    pub const OFFSETS: u64 = 6;
    pub const METRICS: u64 = 7;
}

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a sequence of keys.
pub fn derive_seed(parent: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(mix64(parent), |acc, &k| mix64(acc ^ mix64(k)))
}

pub fn stream(parent: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, keys))
}

/// Uniform draw on the unit sphere in `dim` dimensions (normalized Gaussian).
pub fn unit_sphere<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vector {
    loop {
        let g = Vector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = g.norm();
        if n > 1e-300 {
            return g / n;
        }
    }
}

/// Uniform draw in the unit ball: a sphere draw scaled by `U^(1/dim)`.
pub fn unit_ball<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vector {
    let dir = unit_sphere(dim, rng);
    let r: f64 = rng.random::<f64>().powf(1.0 / dim as f64);
    dir * r
}

/// Uniform draw on `[lo, hi]`.
pub fn uniform<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
