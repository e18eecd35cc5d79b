//! Portable seeded initialisation.
//!
//! All toy weights are drawn from `ChaCha8Rng::seed_from_u64(seed)` (rand_core's
//! PCG32-based seed expansion). Floats are derived directly from `next_u64` as
//! `(x >> 11) * 2^-53`, which gives a uniform value in `[0, 1)` independent of
//! any crate's distribution code. Strings are keyed with 64-bit FNV-1a
//! (offset `0xcbf29ce484222325`, prime `0x100000001b3`).

use ndarray::{Array1, Array2};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Derives an independent stream seed from a base seed and a label, so that
/// adding a new weight tensor never perturbs the existing ones.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    fnv1a64(label.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub struct SeededRng(ChaCha8Rng);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn labelled(seed: u64, label: &str) -> Self {
        Self::new(derive_seed(seed, label))
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || self.uniform(-bound, bound))
    }

    pub fn uniform_vector(&mut self, len: usize, bound: f64) -> Array1<f64> {
        Array1::from_shape_simple_fn(len, || self.uniform(-bound, bound))
    }

    /// Uniform direction on the unit sphere (Box-Muller normals, normalised).
    pub fn unit_vector(&mut self, len: usize) -> Array1<f64> {
        let mut v = Array1::from_shape_simple_fn(len, || {
            let u1 = 1.0 - self.unit();
            let u2 = self.unit();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        let norm = v.dot(&v).sqrt();
        if norm > 0.0 {
            v /= norm;
        }
        v
    }
}
