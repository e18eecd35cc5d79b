use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::AttentionError;
use crate::providers::TextEncoder;
use crate::rng::SeededRng;
use crate::video_model::{BoundingBox, GroundingEntity};

/// NeRF-style Fourier features of a box: for each coordinate of
/// `(x0, y0, x1, y1)` and each `k < F`, `sin(2^k π v), cos(2^k π v)`.
/// Output width is `8·F`, coordinate-major.
pub fn fourier_embed(bbox: &BoundingBox, num_freqs: usize) -> Result<Array1<f64>, AttentionError> {
    if num_freqs == 0 {
        return Err(AttentionError::NoFrequencies);
    }
    let mut out = Vec::with_capacity(8 * num_freqs);
    for v in bbox.coords() {
        for k in 0..num_freqs {
            let arg = (1u64 << k) as f64 * std::f64::consts::PI * v;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    Ok(Array1::from(out))
}

/// Two affine layers with SiLU between, mapping `[text ; fourier]` to the
/// model width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingMLP {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl GroundingMLP {
    pub fn seeded(seed: u64, text_width: usize, num_freqs: usize, hidden: usize, d_model: usize, bound: f64) -> Self {
        let mut r = SeededRng::labelled(seed, "grounding_mlp");
        Self {
            w1: r.uniform_matrix(text_width + 8 * num_freqs, hidden, bound),
            b1: r.uniform_vector(hidden, bound),
            w2: r.uniform_matrix(hidden, d_model, bound),
            b2: r.uniform_vector(d_model, bound),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.w2.ncols()
    }

    pub fn forward(&self, x: &Array1<f64>) -> Result<Array1<f64>, AttentionError> {
        if x.len() != self.input_width() {
            return Err(AttentionError::Shape(format!("mlp input {} != {}", x.len(), self.input_width())));
        }
        let h = (x.dot(&self.w1) + &self.b1).mapv(|v| v / (1.0 + (-v).exp()));
        Ok(h.dot(&self.w2) + &self.b2)
    }
}

/// Grounding tokens `[M, d_model]` for one frame:
/// `mlp([encode_phrase(e_j) ; fourier(l_j)])`.
pub fn build_grounding_tokens(
    entities: &[GroundingEntity],
    text_encoder: &dyn TextEncoder,
    mlp: &GroundingMLP,
    num_freqs: usize,
) -> Result<Array2<f64>, AttentionError> {
    let mut out = Array2::zeros((entities.len(), mlp.output_width()));
    for (j, e) in entities.iter().enumerate() {
        let text = text_encoder
            .encode_phrase(&e.phrase)
            .map_err(|err| AttentionError::Encoder(err.to_string()))?;
        let layout = fourier_embed(&e.bbox, num_freqs)?;
        let input = ndarray::concatenate![ndarray::Axis(0), text, layout];
        out.row_mut(j).assign(&mlp.forward(&input)?);
    }
    Ok(out)
}
