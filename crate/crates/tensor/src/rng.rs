//! Reproducible random streams.
//!
//! The generator is ChaCha20 in counter mode. A `u64` seed becomes the first
//! eight little-endian bytes of the 256-bit key (remaining key bytes zero) and
//! the 64-bit stream id selects independent substreams. Derived quantities:
//!
//! - `uniform()` = `(next_u32 >> 8) · 2⁻²⁴`, in `[0, 1)`.
//! - `normal()` = Box–Muller over two `uniform_f64()` draws (53-bit), using
//!   the `libm` software transcendentals so the stream is bit-identical on
//!   every platform; both outputs of a pair are consumed in order.
//! - `below(n)` = rejection sampling on `next_u64`, unbiased.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

use crate::element::Element;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha20Rng,
    spare: Option<f64>,
}

fn key(seed: u64) -> [u8; 32] {
    let mut k = [0u8; 32];
    k[..8].copy_from_slice(&seed.to_le_bytes());
    k
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha20Rng::from_seed(key(seed)),
            spare: None,
        }
    }

    /// Independent substream of the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::from_seed(key(seed));
        inner.set_stream(stream);
        Rng {
            seed,
            inner,
            spare: None,
        }
    }

    /// Child generator whose stream is a pure function of `(seed, tag)`,
    /// independent of how much of this generator has been consumed.
    pub fn derive(&self, tag: u64) -> Rng {
        Rng::with_stream(self.seed, tag.wrapping_add(1))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f32 {
        (self.next_u32() >> 8) as f32 * (1.0 / 16_777_216.0)
    }

    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform_f64() < p
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn normal_f64(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.uniform_f64();
        let u2 = self.uniform_f64();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    pub fn normal(&mut self) -> f32 {
        self.normal_f64() as f32
    }

    pub fn normal_tensor<T: Element>(&mut self, shape: impl Into<Vec<usize>>, std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64(self.normal_f64() * std))
    }

    pub fn uniform_tensor<T: Element>(&mut self, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64(lo + (hi - lo) * self.uniform_f64()))
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
