//! Stateless substream derivation.
//!
//! Every random draw in the crate comes from a generator seeded by a
//! [`StreamKey`], which is a hash of a path such as
//! `(seed, module, replicate, level, cell)`. Two draws with the same path see
//! the same numbers no matter which thread runs them or in which order, so
//! parallel and serial runs agree bit for bit.

use rand::SeedableRng;
use rand_pcg::Pcg64Mcg;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Module tags keep the streams of different consumers apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Tag {
    Grid = 1,
    Fractal = 2,
    Coupling = 3,
    Monotone = 4,
    Forest = 5,
    Gamma = 6,
    Spine = 7,
    Sbm = 8,
    Laws = 9,
    Sample = 10,
    Audit = 11,
}

/// A node in the tree of substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        StreamKey(splitmix64(seed ^ 0x5354_524d_4c41_4221))
    }

    #[inline]
    pub fn with(self, x: u64) -> Self {
        StreamKey(splitmix64(self.0.rotate_left(23) ^ splitmix64(x)))
    }

    #[inline]
    pub fn tag(self, t: Tag) -> Self {
        self.with(t as u64)
    }

    #[inline]
    pub fn with_u128(self, x: u128) -> Self {
        self.with(x as u64).with((x >> 64) as u64)
    }

    #[inline]
    pub fn value(self) -> u64 {
        self.0
    }

    /// A uniform in [0, 1) taken directly from the key, no generator needed.
    #[inline]
    pub fn uniform(self) -> f64 {
        (splitmix64(self.0) >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    pub fn rng(self) -> Pcg64Mcg {
        Pcg64Mcg::seed_from_u64(self.0)
    }
}
