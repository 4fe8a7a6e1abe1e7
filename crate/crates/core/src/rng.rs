//! Seeded random number generation.
//!
//! Every stochastic choice in the crate (initialization, shuffling, swap
//! selection, feature noise) draws from [`SeededRng`]. The stream is ChaCha8
//! keyed by a 64-bit seed, so identical seeds give identical streams on every
//! platform. Derived quantities are computed here, not by a third-party
//! distribution crate, so their algorithms stay fixed:
//!
//! - `uniform()`: top 53 bits of `next_u64` scaled by 2^-53, in `[0, 1)`.
//! - `below(n)`: rejection sampling on `next_u64` against the largest
//!   multiple of `n`, so the draw is exactly uniform.
//! - `normal()`: Box-Muller, `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// An independent stream derived from `seed`, e.g. one per epoch or per
    /// worker thread.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) has no valid outcome");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
