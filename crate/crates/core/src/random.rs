//! Seeded random streams.
//!
//! All randomness flows through [`ChaCha8Rng`] so that a seed reproduces the
//! same numbers on every platform. Independent streams are derived from a
//! master seed with a SplitMix64 finalizer:
//!
//! `stream_seed(master, tag) = splitmix64(master ^ splitmix64(tag))`
//!
//! Trial `t` of an experiment uses `stream_seed(master, t)`, and each trial
//! further splits that seed by a fixed tag per purpose (channel, pilots,
//! noise), so changing one part of a run never shifts the numbers drawn by
//! another.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[inline]
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_seed(master: u64, tag: u64) -> u64 {
    splitmix64(master ^ splitmix64(tag))
}

/// One draw from `CN(0, variance)`: real and imaginary parts i.i.d. `N(0, variance/2)`.
#[inline]
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let sd = (0.5 * variance).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(sd * re, sd * im)
}
