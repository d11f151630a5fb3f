//! Portable, stream-addressed randomness.
//!
//! Every random draw in the crate comes from a [`SeedStream`]: a ChaCha8
//! keystream whose 256-bit key is the user seed (little-endian in the first
//! eight bytes, zeros elsewhere) and whose 64-bit stream id is derived from a
//! *purpose path*, a short list of integers naming what the draws are for
//! (e.g. `[TRAIN, learner, epoch, example]`). The path is folded with the
//! SplitMix64 finalizer:
//!
//! ```text
//! h = 0x9E37_79B9_7F4A_7C15
//! for x in path: h = splitmix64(h ^ x)
//! splitmix64(z): z += 0x9E3779B97F4A7C15
//!                z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!                z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!                z ^ (z >> 31)
//! ```
//!
//! Uniform reals take the top 53 bits of a `u64` word; bounded integers use
//! Lemire's multiply-shift with rejection. None of this depends on thread
//! scheduling, so any worker can reconstruct any stream independently.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Purpose tags used as the first element of a stream path.
pub mod purpose {
    pub const BOOTSTRAP: u64 = 1;
    pub const NEIGHBORS: u64 = 2;
    pub const INIT: u64 = 3;
    pub const HEAD_INIT: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const HOLDOUT: u64 = 7;
    pub const VALIDATE: u64 = 8;
    pub const PREDICT: u64 = 9;
    pub const PREDICT_DRAW: u64 = 10;
    pub const RESAMPLE: u64 = 11;
    pub const FOLDS: u64 = 12;
    pub const LINK_SPLIT: u64 = 13;
    pub const SYNTH: u64 = 14;
    pub const VERIFY: u64 = 15;
    pub const NEGATIVES: u64 = 16;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a purpose path into a 64-bit ChaCha stream id.
pub fn stream_id(path: &[u64]) -> u64 {
    path.iter().fold(GOLDEN, |h, &x| splitmix64(h ^ x))
}

#[derive(Clone, Debug)]
pub struct SeedStream {
    rng: ChaCha8Rng,
}

impl SeedStream {
    pub fn new(seed: u64, path: &[u64]) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream_id(path));
        SeedStream { rng }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be non-zero.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle driven by [`SeedStream::below`].
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Index drawn proportionally to the increments of `cumulative`, which must
    /// be non-decreasing with a positive last element.
    #[inline]
    pub fn pick_cumulative(&mut self, cumulative: &[f64]) -> usize {
        let total = *cumulative.last().expect("empty cumulative table");
        let r = self.next_f64() * total;
        let i = cumulative.partition_point(|&c| c <= r);
        i.min(cumulative.len() - 1)
    }

    /// Index drawn proportionally to `weights`.
    pub fn pick_weighted(&mut self, weights: &[f64]) -> usize {
        let mut acc = 0.0;
        let cumulative: Vec<f64> = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        self.pick_cumulative(&cumulative)
    }

    /// Standard normal via Box-Muller (one value per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}
