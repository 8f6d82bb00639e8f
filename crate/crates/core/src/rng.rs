//! Seeded random streams.
//!
//! xoshiro256** seeded through a splitmix64 expansion of a 64-bit seed, with
//! standard normal variates from the Box–Muller transform. All arithmetic goes
//! through `libm`, so a seed produces the same stream on every platform.

use alloc::vec::Vec;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256StarStar,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { inner: Xoshiro256StarStar::seed_from_u64(seed), spare: None }
    }

    /// An independent stream identified by `(seed, key)`.
    pub fn stream(seed: u64, key: u64) -> Self {
        Self::new(seed ^ key.wrapping_mul(GOLDEN).rotate_left(29) ^ key)
    }

    /// Stream keyed by a string, e.g. a tensor name.
    pub fn named_stream(seed: u64, name: &str) -> Self {
        Self::stream(seed, fnv1a(name.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `(0, 1]`, 53 bits of precision.
    pub fn next_open_unit(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.next_open_unit();
        let u2 = self.next_open_unit();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    pub fn gaussians(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.next_gaussian() as f32).collect()
    }

    /// Standard normal tensor of the given shape.
    pub fn gaussian_tensor(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| self.next_gaussian() as f32)
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    use core::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}
