//! Deterministic noise routing. Every standard-normal draw used by a weight
//! sampler is addressed by `(sample, layer, neuron)`, so the same draw reaches
//! the same neuron however the surrounding data is ordered.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a key path into a new seed.
pub fn derive_seed(base: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix(base), |acc, &k| splitmix(acc ^ splitmix(k)))
}

/// A fresh generator for the stream addressed by `keys` under `base`.
pub fn rng_for(base: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, keys))
}

/// Addressable source of standard-normal noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpsSource {
    pub seed: u64,
}

impl EpsSource {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// `n` draws for neuron `neuron` of layer `layer` in Monte Carlo sample `sample`.
    pub fn normal<T: Scalar>(&self, sample: usize, layer: usize, neuron: usize, n: usize) -> Vec<T> {
        let mut rng = rng_for(self.seed, &[sample as u64, layer as u64, neuron as u64]);
        (0..n)
            .map(|_| T::lit(StandardNormal.sample(&mut rng)))
            .collect()
    }

    /// `[rows, cols]` noise whose column `d` is the stream of neuron `d`.
    pub fn matrix<T: Scalar>(&self, sample: usize, layer: usize, rows: usize, cols: usize) -> Tensor<T> {
        let mut t = Tensor::zeros(&[rows, cols]);
        for d in 0..cols {
            for (i, e) in self.normal::<T>(sample, layer, d, rows).into_iter().enumerate() {
                t[[i, d]] = e;
            }
        }
        t
    }
}
