//! Seeded random streams.
//!
//! Every random quantity is drawn from a ChaCha8 generator
//! (`rand_chacha::ChaCha8Rng::seed_from_u64`). Independent streams (one per
//! dataset sample, Monte-Carlo trial, weight initialisation, ...) get their
//! own 64-bit seed via [`derive_seed`], a SplitMix64-style mix of the master
//! seed, a stream tag and a counter. Results therefore never depend on the
//! order in which work items are scheduled.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SimRng = ChaCha8Rng;

/// Stream tags for [`derive_seed`].
pub mod stream {
    pub const BEAMFORMER: u64 = 0x5746;
    pub const SAMPLE: u64 = 0x5341;
    pub const TRIAL: u64 = 0x5452;
    pub const SHUFFLE: u64 = 0x5348;
    pub const INIT: u64 = 0x494e;
    pub const DROPOUT: u64 = 0x4452;
    pub const PAIRS: u64 = 0x5041;
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the `index`-th item of stream `tag` under `master`.
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ tag) ^ index)
}

/// Draws from CN(0, variance): real and imaginary parts are independent
/// N(0, variance / 2).
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (0.5 * variance).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}
