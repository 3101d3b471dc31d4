//! Deterministic random streams.
//!
//! Every stochastic consumer (dataset sample, training iteration, inference
//! draw) gets its own ChaCha stream derived from a root seed plus a stream
//! tag plus an index. Derivation is a splitmix-style hash, so streams are
//! independent of evaluation order and safe to draw in parallel.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{numel, Tensor};

/// Stream tags keep unrelated consumers of the same root seed uncorrelated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Phantom,
    Noise,
    Batch,
    Epsilon,
    Init,
    Inference,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Phantom => 0x70_68_61_6e,
            Stream::Noise => 0x6e_6f_69_73,
            Stream::Batch => 0x62_61_74_63,
            Stream::Epsilon => 0x65_70_73_6c,
            Stream::Init => 0x69_6e_69_74,
            Stream::Inference => 0x64_65_6e_6f,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed from (root, stream, index).
pub fn derive_seed(root: u64, stream: Stream, index: u64) -> u64 {
    splitmix(splitmix(root ^ stream.tag()).wrapping_add(index))
}

/// Seeded source of standard-normal draws.
pub struct NoiseSource {
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        NoiseSource { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn for_stream(root: u64, stream: Stream, index: u64) -> Self {
        NoiseSource::new(derive_seed(root, stream, index))
    }

    pub fn normal_scalar(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Tensor of iid N(0,1) draws.
    pub fn standard_normal(&mut self, shape: &[usize]) -> Tensor {
        let data: Vec<f64> = (0..numel(shape)).map(|_| self.rng.sample(StandardNormal)).collect();
        Tensor::new(data, shape).expect("length matches by construction")
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.gen_range(lo..hi)
    }

    pub fn uniform_usize(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }
}
