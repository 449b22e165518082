//! Portable, seed-addressed randomness.
//!
//! Every stochastic routine in the crate draws from a [`DrawStream`]:
//!
//! * the generator is ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//!   `SeedableRng::seed_from_u64`, both of which are value-stable across
//!   platforms and releases;
//! * a uniform on `[0, 1)` takes the top 53 bits of one `u64` word,
//!   `(w >> 11) * 2^-53`; the open-at-zero variant used inside the
//!   logarithm is `((w >> 11) + 1) * 2^-53`, which lies in `(0, 1]`;
//! * standard normals come in Box–Muller pairs from two consecutive words
//!   `(u1, u2)`: `r = sqrt(-2 ln u1)`, `z0 = r cos(2 pi u2)`,
//!   `z1 = r sin(2 pi u2)`, with `ln`, `cos` and `sin` taken from the
//!   pure-Rust `libm` crate so results do not depend on the host libm.
//!
//! Per-record seeds come from [`derive_seed`], the first eight bytes
//! (little-endian) of SHA-256 over
//! `base_seed_le || len(key)_le || key || index_le`, all integers as `u64`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

/// Stable 64-bit seed for the `index`-th item under `key`.
pub fn derive_seed(base_seed: u64, key: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base_seed.to_le_bytes());
    hasher.update((key.len() as u64).to_le_bytes());
    hasher.update(key.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

/// A deterministic stream of uniform and Gaussian draws.
pub struct DrawStream {
    rng: ChaCha8Rng,
}

impl DrawStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    #[inline]
    pub fn next_word(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_word() >> 11) as f64 * TWO_POW_M53
    }

    /// Uniform on `(0, 1]`.
    #[inline]
    fn uniform_open_zero(&mut self) -> f64 {
        ((self.next_word() >> 11) + 1) as f64 * TWO_POW_M53
    }

    /// Uniform on `[lo, hi)`.
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Two independent standard normals from exactly two words.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.uniform_open_zero();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * libm::cos(theta), r * libm::sin(theta))
    }
}
