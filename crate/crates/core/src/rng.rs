//! Seed derivation. Every random draw in the pipeline comes from a ChaCha8
//! generator whose seed is a pure function of the run seed and a stream
//! label, so runs with the same seed are bit-identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seed for a named sub-stream ("data", "init", "dropout", "sampling", ...).
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    splitmix64(seed ^ splitmix64(fnv1a(name.as_bytes())))
}

/// Counter-based seed: a distinct, reproducible value per `(seed, a, b)`.
pub fn counter_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(a)) ^ b)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    rng_from(stream_seed(seed, name))
}

/// Normal draw truncated to ±2 standard deviations by resampling.
pub fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Seed derived from the exact bit pattern of a slice of floats.
pub fn content_seed(seed: u64, values: &[f64]) -> u64 {
    values
        .iter()
        .fold(splitmix64(seed), |h, v| splitmix64(h ^ v.to_bits()))
}
