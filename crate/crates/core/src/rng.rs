//! Seeded randomness shared by every pipeline stage.
//!
//! All samplers are written out here (rather than taken from a distribution
//! crate) so that a seed yields the same draws on every platform.

use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SaRng {
    inner: ChaCha8Rng,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent seed for a named sub-stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix(splitmix(seed) ^ stream.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

impl SaRng {
    pub fn new(seed: u64) -> Self {
        Self { inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// A fresh generator for `stream`, independent of this one's state.
    pub fn stream(seed: u64, stream: u64) -> Self {
        Self::new(derive_seed(seed, stream))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Standard normal via Box-Muller (one draw per call, no cached pair).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
    }

    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    /// Laplace(0, b) by inverse CDF.
    pub fn laplace(&mut self, b: f64) -> f64 {
        let u = self.uniform_open() - 0.5;
        let s = if u < 0.0 { -1.0 } else { 1.0 };
        -b * s * libm::log(1.0 - 2.0 * u.abs())
    }

    /// Beta(a, b) by Jöhnk's rejection method; suited to shape parameters below 1.
    pub fn beta(&mut self, a: f64, b: f64) -> f64 {
        loop {
            let u = self.uniform_open();
            let v = self.uniform_open();
            let x = libm::pow(u, 1.0 / a);
            let y = libm::pow(v, 1.0 / b);
            let s = x + y;
            if s <= 1.0 && s > 0.0 {
                return x / s;
            }
            if s <= 1.0 {
                // both underflowed: fall back to logs
                let lx = libm::log(u) / a;
                let ly = libm::log(v) / b;
                let m = lx.max(ly);
                let (ex, ey) = (libm::exp(lx - m), libm::exp(ly - m));
                return ex / (ex + ey);
            }
        }
    }

    /// Fisher-Yates.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in 0..k.min(n) {
            let j = i + self.below(n - i);
            p.swap(i, j);
        }
        p.truncate(k.min(n));
        p
    }
}
