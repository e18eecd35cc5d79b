//! Control-branch residuals: production, scaling and injection.

use ndarray::{Array3, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::attention::ContextMode;
use crate::providers::{ControlBranch, ProviderError};
use crate::video_model::DepthSequence;

#[derive(Debug, thiserror::Error)]
pub enum ControlError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("control scale must be finite and non-negative, got {0}")]
    Scale(f64),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// One residual tensor per backbone injection site, each `[N, h_l, w_l, c_l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlResiduals {
    pub levels: Vec<Array4<f64>>,
}

impl ControlResiduals {
    pub fn zeros_like(shapes: &[[usize; 4]]) -> Self {
        Self { levels: shapes.iter().map(|s| Array4::zeros((s[0], s[1], s[2], s[3]))).collect() }
    }

    pub fn shapes(&self) -> Vec<[usize; 4]> {
        self.levels.iter().map(|l| { let d = l.dim(); [d.0, d.1, d.2, d.3] }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionKind {
    #[default]
    Depth,
    Pose,
    None,
}

impl ConditionKind {
    pub fn channels(self) -> usize {
        match self {
            ConditionKind::Depth => 1,
            ConditionKind::Pose => 3,
            ConditionKind::None => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    pub scale: f64,
    pub condition: ConditionKind,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self { scale: 1.0, condition: ConditionKind::Depth }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        if !self.scale.is_finite() || self.scale < 0.0 {
            return Err(ControlError::Scale(self.scale));
        }
        Ok(())
    }

    pub fn enabled(&self) -> bool {
        self.condition != ConditionKind::None
    }
}

/// Pixel-resolution condition maps `[N, H, W, cc]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMaps {
    data: Array4<f64>,
}

impl ConditionMaps {
    pub fn new(data: Array4<f64>) -> Result<Self, ControlError> {
        if data.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(ControlError::Shape("condition values must be finite and in [0, 1]".into()));
        }
        Ok(Self { data })
    }

    pub fn from_depth(depth: &DepthSequence) -> Self {
        Self { data: depth.maps().clone().insert_axis(Axis(3)) }
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().3
    }

    /// Area-averages each map onto the latent grid: `[N, h, w, cc]`.
    pub fn to_latent_grid(&self, latent_hw: (usize, usize)) -> Result<Array4<f64>, ControlError> {
        let (n, big_h, big_w, cc) = self.data.dim();
        let (h, w) = latent_hw;
        if h == 0 || w == 0 || big_h % h != 0 || big_w % w != 0 {
            return Err(ControlError::Shape(format!("conditions {big_h}x{big_w} not divisible into {h}x{w}")));
        }
        let (bh, bw) = (big_h / h, big_w / w);
        Ok(Array4::from_shape_fn((n, h, w, cc), |(i, y, x, c)| {
            self.data.slice(ndarray::s![i, y * bh..(y + 1) * bh, x * bw..(x + 1) * bw, c]).mean().unwrap()
        }))
    }
}

/// Residuals from the inflated control branch. `conditions` is `[N, h, w, cc]`
/// at latent resolution.
pub fn control_residuals(
    branch: &dyn ControlBranch,
    latents: &Array4<f64>,
    t: usize,
    contexts: &Array3<f64>,
    mode: ContextMode,
    conditions: &Array4<f64>,
) -> Result<ControlResiduals, ControlError> {
    if conditions.dim().0 != latents.dim().0 {
        return Err(ControlError::Shape(format!(
            "{} condition maps for {} frames",
            conditions.dim().0,
            latents.dim().0
        )));
    }
    Ok(branch.residuals(latents, t, contexts, mode, conditions)?)
}

pub fn scale_residuals(r: &ControlResiduals, s: f64) -> ControlResiduals {
    ControlResiduals { levels: r.levels.iter().map(|l| l * s).collect() }
}

/// Elementwise `features[l] + r.levels[l]`.
pub fn inject_residuals(features: &[Array4<f64>], r: &ControlResiduals) -> Result<Vec<Array4<f64>>, ControlError> {
    if features.len() != r.levels.len() {
        return Err(ControlError::Shape(format!("{} feature levels, {} residual levels", features.len(), r.levels.len())));
    }
    features
        .iter()
        .zip(&r.levels)
        .enumerate()
        .map(|(i, (f, res))| {
            if f.dim() != res.dim() {
                return Err(ControlError::Shape(format!("level {i}: {:?} vs {:?}", f.dim(), res.dim())));
            }
            Ok(Zip::from(f).and(res).map_collect(|a, b| a + b))
        })
        .collect()
}

/// Splits a clip-shaped residual set into per-frame sets (used by callers that
/// run the backbone one frame at a time).
pub fn residuals_for_frame(r: &ControlResiduals, i: usize) -> ControlResiduals {
    ControlResiduals {
        levels: r.levels.iter().map(|l| l.index_axis(Axis(0), i).insert_axis(Axis(0)).to_owned()).collect(),
    }
}
