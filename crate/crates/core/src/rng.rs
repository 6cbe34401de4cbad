//! Seedable, portable random streams.
//!
//! All randomness in the crate flows through [`GwclRng`], a ChaCha8 stream
//! seeded from a 64-bit integer via `SeedableRng::seed_from_u64` (PCG32
//! expansion of the seed into the 256-bit ChaCha key). Derived quantities use
//! fixed, documented reductions so sequences can be replicated elsewhere:
//!
//! * `below(n)`: Lemire's multiply-shift with rejection on `next_u64`.
//! * `unit_f64()`: top 53 bits of `next_u64` scaled by 2^-53, in `[0, 1)`.
//! * `shuffle`: Fisher-Yates from the back, `j = below(i + 1)`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GwclRng {
    inner: ChaCha8Rng,
}

impl GwclRng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Seed for an independent sub-stream (`stream` selects the ChaCha nonce).
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.unit_f64()
    }

    /// Standard normal via Box-Muller (one draw per call, the sine branch is discarded).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.unit_f64();
        let u2 = self.unit_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Snapshot for checkpoints: `(seed, stream, word_pos)`.
    pub fn snapshot(&self) -> ([u8; 32], u64, u128) {
        (
            self.inner.get_seed(),
            self.inner.get_stream(),
            self.inner.get_word_pos(),
        )
    }

    pub fn restore(seed: [u8; 32], stream: u64, word_pos: u128) -> Self {
        let mut inner = ChaCha8Rng::from_seed(seed);
        inner.set_stream(stream);
        inner.set_word_pos(word_pos);
        Self { inner }
    }
}
