//! Seeded, splittable random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose seed is
//! derived from a parent seed and a list of integer tags, so a stream for
//! "location 7, channel realization 3" is the same no matter which worker
//! thread asks for it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::{CMat, C64};

pub type Stream = ChaCha8Rng;

/// Tags that separate the independent uses of one location seed.
pub mod tag {
    pub const LAYOUT: u64 = 1;
    pub const CORRELATION: u64 = 2;
    pub const FCP_CHANNEL: u64 = 3;
    pub const MOMENT_POOL: u64 = 4;
    pub const LOCATION: u64 = 5;
    pub const SHADOWING: u64 = 6;
    pub const PILOT_NOISE: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `(parent, tags...)`.
pub fn derive_seed(parent: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(parent);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    s
}

pub fn stream(parent: u64, tags: &[u64]) -> Stream {
    Stream::seed_from_u64(derive_seed(parent, tags))
}

/// Circularly-symmetric complex Gaussian with unit variance.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

pub fn complex_normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> CMat {
    CMat::from_fn(rows, cols, |_, _| complex_normal(rng))
}
