use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;

/// Seeded random stream backed by ChaCha8.
///
/// The ChaCha8 key is expanded from the 64-bit seed with
/// `SeedableRng::seed_from_u64`, so a seed yields the same stream on every
/// platform. Independent consumers (hash draws, dropout masks, weight init,
/// data generation) should each take their own stream via [`Rng::derive`]
/// so enabling one does not shift another.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

pub const ALGORITHM: &str = "chacha8/seed_from_u64";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Sub-seed for a named consumer. Depends only on the master seed and
    /// the label, never on how much of this stream was already drawn.
    pub fn derive_seed(&self, label: &str) -> u64 {
        splitmix64(self.seed ^ splitmix64(fnv1a(label)))
    }

    pub fn derive(&self, label: &str) -> Rng {
        Rng::new(self.derive_seed(label))
    }

    /// Sub-stream for item `index` of a named family (trial, sample, batch).
    pub fn derive_indexed(&self, label: &str, index: u64) -> Rng {
        Rng::new(splitmix64(self.derive_seed(label) ^ splitmix64(index)))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn sign(&mut self) -> f64 {
        if self.inner.gen::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    /// True with probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.gen::<f64>() < p
    }

    pub fn unit(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// Tensor with entries uniform in `[-a, a)`.
    pub fn uniform_tensor(&mut self, shape: &[usize], a: f64) -> Tensor {
        let n = shape.iter().product();
        if a == 0.0 {
            return Tensor::zeros(shape);
        }
        let dist = Uniform::new(-a, a);
        let data = (0..n).map(|_| dist.sample(&mut self.inner)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }

    /// Glorot-uniform `fan_in × fan_out` matrix.
    pub fn glorot(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform_tensor(&[fan_in, fan_out], a)
    }
}
