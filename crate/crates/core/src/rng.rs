//! Seeded random streams.
//!
//! The raw 64-bit stream is ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`)
//! keyed through `SeedableRng::seed_from_u64`, which is platform independent.
//! Derived draws are defined here rather than through `rand` distributions so
//! they stay fixed across crate upgrades:
//!
//! * `next_f64 = (next_u64 >> 11) · 2⁻⁵³`, uniform on `[0, 1)`;
//! * `standard_normal` is Box–Muller on `u1 = 1 − next_f64`, `u2 = next_f64`,
//!   returning `r·cos θ` and caching `r·sin θ` for the following call.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }
}
