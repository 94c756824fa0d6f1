use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;

/// Counter-based random stream keyed by `(seed, label)`.
///
/// The ChaCha20 key is `SHA-256(seed_le || label)`, so streams with distinct
/// labels are independent and any stream can be replayed from its word
/// counter.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    label: String,
    rng: ChaCha20Rng,
}

/// Serializable position of an [`RngStream`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub label: String,
    pub counter: u64,
}

/// Deterministic stream for `(seed, label)`.
pub fn rng_fork(seed: u64, label: &str) -> RngStream {
    RngStream::new(seed, label)
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(label.as_bytes());
        let key: [u8; 32] = h.finalize().into();
        Self { seed, label: label.to_owned(), rng: ChaCha20Rng::from_seed(key) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Child stream `label/sub` sharing this stream's seed.
    pub fn fork(&self, sub: &str) -> Self {
        Self::new(self.seed, &format!("{}/{}", self.label, sub))
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        u64::try_from(self.rng.get_word_pos()).expect("rng counter overflow")
    }

    pub fn state(&self) -> RngState {
        RngState { seed: self.seed, label: self.label.clone(), counter: self.counter() }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut s = Self::new(state.seed, &state.label);
        s.rng.set_word_pos(u128::from(state.counter));
        s
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal()).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Point on the unit sphere in `dim` dimensions.
    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}
