//! Seeded RNG used for parameter init, template choice, and batch mixing.
//!
//! ChaCha20 keeps every draw reproducible across platforms; normal samples
//! come from Box-Muller so no distribution crate is needed in `no_std`.

use crate::mathfn;
use rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub struct SeededRng {
    inner: ChaCha20Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Derives an independent stream, so subsystems don't share draw order.
    pub fn fork(&mut self, label: u64) -> SeededRng {
        let s = self.inner.next_u64() ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        SeededRng::new(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let mut u1 = self.uniform();
        if u1 < 1e-300 {
            u1 = 1e-300;
        }
        let u2 = self.uniform();
        mathfn::sqrt(-2.0 * mathfn::ln(u1)) * mathfn::cos(2.0 * core::f64::consts::PI * u2)
    }

    pub fn normal_scaled(&mut self, std: f64) -> f64 {
        self.normal() * std
    }

    /// Uniform index in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() over empty range");
        // Rejection sampling keeps the draw unbiased.
        let n64 = n as u64;
        let zone = u64::MAX - (u64::MAX % n64);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return (v % n64) as usize;
            }
        }
    }

    pub fn bool(&mut self) -> bool {
        self.inner.next_u64() & 1 == 1
    }
}
