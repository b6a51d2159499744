//! Seeded deterministic random numbers.
//!
//! Backed by ChaCha8, a counter-based stream cipher whose output is defined
//! bit-for-bit independently of platform and word size.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// An independent stream derived from the same seed.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng { seed: self.seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_tensor(&mut self, shape: impl Into<Vec<usize>>, std: f64) -> Tensor {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * self.normal()).collect();
        Tensor::new(shape, data).expect("length matches shape")
    }

    pub fn uniform_tensor(&mut self, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Tensor {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.uniform_range(lo, hi)).collect();
        Tensor::new(shape, data).expect("length matches shape")
    }

    /// Samples an index from unnormalised non-negative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }
}
