use ndarray::{Array1, Array2};

use super::{ProviderError, TextEncoder};
use crate::rng::{derive_seed, SeededRng};

pub const PAD_TOKEN: &str = "<pad>";

/// Whitespace tokens, each mapped to a unit vector drawn from a generator
/// seeded by `derive_seed(seed, token)`. Sequences are padded or truncated to
/// `length` with the pad token's vector, so `""` encodes to all-pad.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyTextEncoder {
    pub seed: u64,
    pub width: usize,
    pub length: usize,
}

impl ToyTextEncoder {
    pub fn new(seed: u64) -> Self {
        Self { seed, width: 16, length: 8 }
    }

    pub fn token_vector(&self, token: &str) -> Array1<f64> {
        SeededRng::new(derive_seed(self.seed, token)).unit_vector(self.width)
    }

    /// Mean of the token vectors; `""` gives the pad vector.
    pub fn mean_token_vector(&self, text: &str) -> Array1<f64> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            return self.token_vector(PAD_TOKEN);
        }
        let mut sum = Array1::zeros(self.width);
        for t in &tokens {
            sum += &self.token_vector(t);
        }
        sum / tokens.len() as f64
    }
}

impl TextEncoder for ToyTextEncoder {
    fn encode(&self, text: &str) -> Result<Array2<f64>, ProviderError> {
        let mut tokens: Vec<&str> = text.split_whitespace().take(self.length).collect();
        tokens.resize(self.length, PAD_TOKEN);
        let mut out = Array2::zeros((self.length, self.width));
        for (row, tok) in tokens.iter().enumerate() {
            out.row_mut(row).assign(&self.token_vector(tok));
        }
        Ok(out)
    }

    fn encode_phrase(&self, phrase: &str) -> Result<Array1<f64>, ProviderError> {
        Ok(self.mean_token_vector(phrase))
    }

    fn width(&self) -> usize {
        self.width
    }

    fn length(&self) -> usize {
        self.length
    }
}
