use serde::{Deserialize, Serialize};

use super::DiffusionError;

/// Linear β schedule with cumulative ᾱ and an evenly strided inference
/// subsequence. ᾱ at timestep 0 is defined as 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    train_steps: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    inference_steps: Vec<usize>,
}

pub fn make_schedule(
    train_steps: usize,
    beta_start: f64,
    beta_end: f64,
    num_inference_steps: usize,
) -> Result<NoiseSchedule, DiffusionError> {
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(DiffusionError::InvalidSchedule(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    if train_steps == 0 || num_inference_steps == 0 || num_inference_steps > train_steps {
        return Err(DiffusionError::InvalidSchedule(format!(
            "need 1 <= num_inference_steps ({num_inference_steps}) <= T ({train_steps})"
        )));
    }
    let betas: Vec<f64> = (0..train_steps)
        .map(|i| {
            if train_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (train_steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(train_steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    let stride = train_steps / num_inference_steps;
    let inference_steps = (1..=num_inference_steps).map(|k| k * stride).collect();
    Ok(NoiseSchedule { train_steps, betas, alpha_bars, inference_steps })
}

impl NoiseSchedule {
    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// ᾱ_1..ᾱ_T.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Inference timesteps in ascending order.
    pub fn inference_steps(&self) -> &[usize] {
        &self.inference_steps
    }

    pub fn num_inference_steps(&self) -> usize {
        self.inference_steps.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        match t {
            0 => Ok(1.0),
            t if t <= self.train_steps => Ok(self.alpha_bars[t - 1]),
            t => Err(DiffusionError::TimestepOutOfRange { t, max: self.train_steps }),
        }
    }

    /// Timestep at trajectory position `k` (0 is the clean latent).
    pub fn timestep_at(&self, k: usize) -> usize {
        if k == 0 {
            0
        } else {
            self.inference_steps[k - 1]
        }
    }
}

#[cfg(test)]
impl NoiseSchedule {
    /// A schedule with hand-picked ᾱ values at timesteps 1..=len.
    pub(crate) fn from_alpha_bars_for_tests(alpha_bars: Vec<f64>) -> Self {
        let n = alpha_bars.len();
        Self { train_steps: n, betas: vec![0.0; n], alpha_bars, inference_steps: (1..=n).collect() }
    }
}
