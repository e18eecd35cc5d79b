//! Optical-flow guided smoothing of inverted latents.
//!
//! Flow between consecutive frames is collapsed to a per-pixel magnitude,
//! normalized by the clip-wide maximum, thresholded into a static-region
//! mask, pooled down to latent resolution, and used to copy static latent
//! cells forward from the previous (already smoothed) frame.

use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis, Zip};

use crate::exec::{self, Execution};
use crate::tensor_io::{self, TensorIoError};

#[derive(Debug, thiserror::Error)]
pub enum SmoothingError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("threshold must be finite and non-negative, got {0}")]
    Threshold(f64),
    #[error(transparent)]
    Io(#[from] TensorIoError),
}

/// Displacement between consecutive frames, `[N-1, H, W, 2]`; channel 0 is
/// vertical, channel 1 horizontal.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    data: Array4<f64>,
}

impl FlowField {
    pub fn new(data: Array4<f64>) -> Result<Self, SmoothingError> {
        if data.dim().3 != 2 {
            return Err(SmoothingError::Dimension(format!("flow needs 2 channels, got {}", data.dim().3)));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(SmoothingError::Dimension("flow contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(pairs: usize, height: usize, width: usize) -> Self {
        Self { data: Array4::zeros((pairs, height, width, 2)) }
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn pairs(&self) -> usize {
        self.data.dim().0
    }

    pub fn read(path: &Path) -> Result<Self, SmoothingError> {
        Self::new(tensor_io::read_tensor4(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), SmoothingError> {
        Ok(tensor_io::write_tensor4(path, &self.data)?)
    }
}

/// Normalized magnitudes `[N-1, H, W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeMaps {
    pub data: Array3<f64>,
}

/// Binary static-region masks `[N-1, h, w]` (1 = static).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaticMasks {
    pub data: Array3<u8>,
}

/// Per-pixel Euclidean norm of the two flow channels.
pub fn magnitude_map(flow: &FlowField) -> Array3<f64> {
    flow.data.map_axis(Axis(3), |v| (v[0] * v[0] + v[1] * v[1]).sqrt())
}

/// Divides by the maximum over all maps; an all-zero input stays all-zero.
pub fn normalize_magnitudes(mags: &Array3<f64>) -> MagnitudeMaps {
    let max = mags.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return MagnitudeMaps { data: Array3::zeros(mags.dim()) };
    }
    MagnitudeMaps { data: mags / max }
}

/// 1 where the magnitude is strictly below `threshold`.
pub fn static_mask(mag: &MagnitudeMaps, threshold: f64) -> Result<Array3<u8>, SmoothingError> {
    if !threshold.is_finite() || threshold < 0.0 {
        return Err(SmoothingError::Threshold(threshold));
    }
    Ok(mag.data.mapv(|m| u8::from(m < threshold)))
}

/// Area-average pooling to `(h, w)`, re-binarized with ties going to static.
pub fn downsample_mask(mask: ArrayView2<u8>, target: (usize, usize)) -> Result<Array2<u8>, SmoothingError> {
    let (big_h, big_w) = mask.dim();
    let (h, w) = target;
    if h == 0 || w == 0 || big_h % h != 0 || big_w % w != 0 {
        return Err(SmoothingError::Dimension(format!(
            "mask {big_h}x{big_w} not divisible into {h}x{w}"
        )));
    }
    let (bh, bw) = (big_h / h, big_w / w);
    let area = bh * bw;
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let ones: usize = mask.slice(s![y * bh..(y + 1) * bh, x * bw..(x + 1) * bw]).iter().map(|&v| v as usize).sum();
        u8::from(2 * ones >= area)
    }))
}

/// Flow → latent-resolution static masks, one map per consecutive pair.
pub fn masks_from_flow(
    exec: Execution,
    flow: &FlowField,
    threshold: f64,
    latent_hw: (usize, usize),
) -> Result<StaticMasks, SmoothingError> {
    let mags = normalize_magnitudes(&magnitude_map(flow));
    let pixel = static_mask(&mags, threshold)?;
    let pooled = exec::try_map_indexed(exec, pixel.dim().0, |i| downsample_mask(pixel.index_axis(Axis(0), i), latent_hw))?;
    let mut data = Array3::zeros((pooled.len(), latent_hw.0, latent_hw.1));
    for (i, m) in pooled.iter().enumerate() {
        data.index_axis_mut(Axis(0), i).assign(m);
    }
    Ok(StaticMasks { data })
}

/// Sequential blend `z^i ← z^{i-1}·m^i + z^i·(1 − m^i)` for `i = 2..N`, reading
/// the already-smoothed previous frame. Masks broadcast across channels.
pub fn smooth_latents(latents: &Array4<f64>, masks: &StaticMasks) -> Result<Array4<f64>, SmoothingError> {
    let (n, h, w, _) = latents.dim();
    let (nm, mh, mw) = masks.data.dim();
    if n == 0 || nm != n - 1 || (mh, mw) != (h, w) {
        return Err(SmoothingError::Dimension(format!(
            "latents {:?} need {} masks of {h}x{w}, got {:?}",
            latents.dim(),
            n.saturating_sub(1),
            masks.data.dim()
        )));
    }
    let mut out = latents.clone();
    for i in 1..n {
        let (prev, mut cur) = out.multi_slice_mut((s![i - 1, .., .., ..], s![i, .., .., ..]));
        let mask = masks.data.index_axis(Axis(0), i - 1);
        Zip::from(cur.lanes_mut(Axis(2)))
            .and(prev.lanes(Axis(2)))
            .and(&mask)
            .for_each(|mut c, p, &m| {
                if m == 1 {
                    c.assign(&p);
                }
            });
    }
    Ok(out)
}
