//! Seeded random streams.
//!
//! Every stochastic component draws from a ChaCha8 stream derived from a
//! 64-bit seed plus a stream id, so results never depend on thread
//! scheduling or call order across components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const RNG_ALGORITHM: &str = "chacha8";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub algorithm: String,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            algorithm: RNG_ALGORITHM.to_string(),
        }
    }

    /// Root generator for this seed.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// Independent sub-stream identified by `path`, e.g. `[epoch, sample]`.
    pub fn stream(&self, path: &[u64]) -> ChaCha8Rng {
        let mut h = self.seed ^ 0x9e37_79b9_7f4a_7c15;
        for &p in path {
            h = splitmix(h ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)));
        }
        ChaCha8Rng::seed_from_u64(h)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
