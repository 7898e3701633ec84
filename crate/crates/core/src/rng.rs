//! Seeded random streams.
//!
//! Every stochastic choice in the crate draws from a ChaCha8 stream. A stream
//! is keyed by a 64-bit seed plus a string label: the 32-byte ChaCha key is the
//! SHA-256 of `seed.to_le_bytes() ++ label`. Derived quantities use only
//! `next_u64`, so results do not depend on `rand` distribution internals:
//!
//! * `uniform()`  = `(next_u64() >> 11) * 2^-53`
//! * `below(n)`   = Lemire multiply-shift with rejection, unbiased
//! * `normal()`   = Box-Muller on two fresh uniforms (cosine branch only)
//! * `shuffle()`  = Fisher-Yates from the last index down, `j = below(i + 1)`

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct SeededRng(ChaCha8Rng);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::derive(seed, "")
    }

    pub fn derive(seed: u64, label: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(label.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest[..32]);
        SeededRng(ChaCha8Rng::from_seed(key))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

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

    pub fn normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 over the little-endian bytes of a sequence of f64 slices.
pub fn checksum_f64<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        for v in part {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}
