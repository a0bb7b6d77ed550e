use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{TextEmbedding, TextEncoder};
use crate::tensor::Tensor;

const NULL_TOKEN: &str = "\u{0}null";

/// Deterministic stand-in for a CLIP-style text encoder.
///
/// Each lowercase whitespace-separated token maps to a unit-norm Gaussian
/// vector seeded from `SHA-256(seed ‖ token)`. The empty prompt maps to a
/// single fixed null token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubTextEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl StubTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let v = Tensor::randn(&[self.dim], &mut rng).into_data();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }

    pub fn tokens(prompt: &str) -> Vec<String> {
        prompt.split_whitespace().map(str::to_lowercase).collect()
    }

    pub fn embed(&self, prompt: &str) -> TextEmbedding {
        let mut tokens = Self::tokens(prompt);
        if tokens.is_empty() {
            tokens.push(NULL_TOKEN.to_string());
        }
        let data: Vec<f64> = tokens.iter().flat_map(|t| self.token_vector(t)).collect();
        TextEmbedding::new(Tensor::new(vec![tokens.len(), self.dim], data).expect("sized"))
            .expect("at least one token")
    }

    pub fn null(&self) -> TextEmbedding {
        self.embed("")
    }
}

impl TextEncoder for StubTextEncoder {
    fn encode(&self, prompt: &str) -> TextEmbedding {
        self.embed(prompt)
    }
}
