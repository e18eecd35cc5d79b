use ndarray::Array2;

use crate::video_model::VideoGrounding;

/// Latent-resolution region (1 = preserved) that is re-anchored to the
/// inversion trajectory before every denoising step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InpaintMask {
    data: Array2<u8>,
}

impl InpaintMask {
    pub fn new(data: Array2<u8>) -> Option<Self> {
        data.iter().all(|&v| v <= 1).then_some(Self { data })
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn preserved_cells(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }
}

/// Cells whose centre lies outside every box of every frame. Boxes are
/// half-open, so a cell centre on a right/bottom edge is outside. Returns
/// `None` when no such cell exists; with no boxes at all every cell is kept.
pub fn derive_inpaint_mask(g: &VideoGrounding, latent_hw: (usize, usize)) -> Option<InpaintMask> {
    let (h, w) = latent_hw;
    let data = Array2::from_shape_fn((h, w), |(y, x)| {
        let (cx, cy) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
        let covered = g.frames().iter().flatten().any(|e| e.bbox.contains(cx, cy));
        u8::from(!covered)
    });
    if data.iter().all(|&v| v == 0) {
        return None;
    }
    Some(InpaintMask { data })
}
