//! Noise schedules, deterministic DDIM stepping and inversion, classifier-free
//! guidance and per-frame null-text optimization.

mod ddim;
mod guidance;
mod null_text;
mod schedule;

pub use ddim::{
    ddim_coefficients, ddim_invert_frame, ddim_invert_step, ddim_sample_frame, ddim_step,
    ddim_update, InversionTrajectory,
};
pub use guidance::cfg_predict;
pub use null_text::{
    guided_reconstruct, optimize_null_embeddings, FrameNullResult, NullOptOptions, NullOptReport,
    NullTrajectory,
};
pub use schedule::{make_schedule, NoiseSchedule};

use ndarray::{Array2, Array3};

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("invalid schedule parameters: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} outside schedule (0..={max})")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("timestep order violated: {0}")]
    TimestepOrder(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {what} at timestep {t}")]
    NonFinite { what: &'static str, t: usize },
    #[error("denoiser failure: {0}")]
    Denoiser(String),
    #[error(transparent)]
    Io(#[from] crate::tensor_io::TensorIoError),
}

/// Maps a cotangent on the noise prediction to a gradient on the context.
pub type Pullback<'a> = Box<dyn FnOnce(&Array3<f64>) -> Array2<f64> + 'a>;

/// A single-frame noise predictor `ε(z, t, context)` over `[h, w, c]` latents
/// and `[L, d_ctx]` contexts.
pub trait FrameDenoiser: Sync {
    fn predict(&self, z: &Array3<f64>, t: usize, context: &Array2<f64>) -> Result<Array3<f64>, DiffusionError>;

    /// Prediction together with its vector-Jacobian product w.r.t. `context`.
    fn predict_with_pullback<'a>(
        &'a self,
        z: &Array3<f64>,
        t: usize,
        context: &Array2<f64>,
    ) -> Result<(Array3<f64>, Pullback<'a>), DiffusionError>;
}

/// `ε ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl FrameDenoiser for ZeroDenoiser {
    fn predict(&self, z: &Array3<f64>, _t: usize, _context: &Array2<f64>) -> Result<Array3<f64>, DiffusionError> {
        Ok(Array3::zeros(z.dim()))
    }

    fn predict_with_pullback<'a>(
        &'a self,
        z: &Array3<f64>,
        _t: usize,
        context: &Array2<f64>,
    ) -> Result<(Array3<f64>, Pullback<'a>), DiffusionError> {
        let dim = context.dim();
        Ok((Array3::zeros(z.dim()), Box::new(move |_| Array2::zeros(dim))))
    }
}
