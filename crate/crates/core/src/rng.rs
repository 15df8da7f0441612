//! Counter-based random numbers keyed by `(seed, domain, iteration, index)`.
//!
//! Every draw is a pure function of its key, so parallel evaluation order
//! never changes results and a resumed run only needs the seed and the
//! iteration counter.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Separate key spaces so different consumers never share a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    DropoutQ = 1,
    ViewChoice = 2,
    Init = 3,
    Synthetic = 4,
}

/// Words reserved per index; a uniform draw consumes two.
const WORDS_PER_INDEX: u128 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
    domain: Domain,
}

impl CounterRng {
    pub fn new(seed: u64, domain: Domain) -> Self {
        Self { seed, domain }
    }

    fn key(&self) -> u64 {
        // SplitMix64 finaliser to decorrelate nearby seeds
        let mut z = self
            .seed
            .wrapping_add((self.domain as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Stream positioned at `(iteration, index)`.
    pub fn stream(&self, iteration: u64, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.key());
        rng.set_stream(iteration);
        rng.set_word_pos(index as u128 * WORDS_PER_INDEX);
        rng
    }

    /// Uniform draw from the open interval (0, 1); exact zeros are redrawn.
    pub fn uniform_open(&self, iteration: u64, index: u64) -> f64 {
        let mut rng = self.stream(iteration, index);
        loop {
            // 53 random mantissa bits
            let v = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            if v > 0.0 && v < 1.0 {
                return v;
            }
        }
    }

    pub fn index_below(&self, iteration: u64, index: u64, n: usize) -> usize {
        self.stream(iteration, index).random_range(0..n)
    }
}
