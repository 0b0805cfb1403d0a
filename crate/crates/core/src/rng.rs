//! Seeded, purpose-labelled random streams.
//!
//! Every stochastic consumer (init, split, batch sampling, probe sets, random
//! directions, ...) derives its own stream from `(master_seed, purpose_label)`
//! — optionally with extra integer indices — by hashing the tuple into a
//! ChaCha key. Streams are independent by construction, so adding a new
//! consumer never perturbs the draws of an existing one, and identical
//! `(master_seed, label, indices)` reproduce identical draws across runs and
//! platforms (ChaCha is endian-stable and the transcendentals below come from
//! `libm`, not the system math library).

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const SCALE_53: f64 = 1.0 / (1u64 << 53) as f64;

/// A counter-based random stream bound to one purpose.
///
/// Single-owner: one stream must not be shared between concurrent tasks.
/// Derive one stream per task instead.
#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    label: String,
    chacha: ChaCha8Rng,
    spare_normal: Option<f64>,
    draws: u64,
}

impl RngStream {
    /// Derive the stream for `(master_seed, label)`.
    pub fn derive(master_seed: u64, label: &str) -> Self {
        Self::derive_indexed(master_seed, label, &[])
    }

    /// Derive the stream for `(master_seed, label, indices)`.
    ///
    /// The indices let callers split one purpose into independent per-item
    /// streams (e.g. one per checkpoint and direction) so that parallel
    /// evaluation order cannot change the draws.
    pub fn derive_indexed(master_seed: u64, label: &str, indices: &[u64]) -> Self {
        let mut h = Sha256::new();
        h.update(master_seed.to_le_bytes());
        h.update([0x1f]);
        h.update(label.as_bytes());
        for ix in indices {
            h.update([0x1f]);
            h.update(ix.to_le_bytes());
        }
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        Self {
            master_seed,
            label: label.to_string(),
            chacha: ChaCha8Rng::from_seed(key),
            spare_normal: None,
            draws: 0,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Number of raw 64-bit words drawn so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.chacha.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of entropy.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * SCALE_53
    }

    /// Uniform in `(0, 1]`; safe as a log argument.
    fn uniform_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * SCALE_53
    }

    /// Uniform integer in `[0, n)` via rejection sampling (no modulo bias).
    pub fn uniform_usize(&mut self, n: usize) -> usize {
        assert!(n > 0, "uniform_usize: empty range");
        let n = n as u64;
        let zone = (u64::MAX / n) * n;
        loop {
            let r = self.next_u64();
            if r < zone {
                return (r % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller (the spare half is cached).
    pub fn normal_f64(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform_open01();
        let u2 = self.uniform_f64();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for x in out.iter_mut() {
            *x = self.normal_f64();
        }
    }

    /// Partial Fisher-Yates: the first `k` elements of a random permutation
    /// of `0..n`, each index appearing at most once.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "sample_distinct: k > n");
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.uniform_usize(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        let n = items.len();
        for i in (1..n).rev() {
            let j = self.uniform_usize(i + 1);
            items.swap(i, j);
        }
    }
}
