use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis};

use super::toy_text::ToyTextEncoder;
use super::{DepthEstimator, Embedder, FlowEstimator, LatentCodec, ProviderError};
use crate::exec::{self, Execution};
use crate::flow_smoothing::FlowField;
use crate::rng::SeededRng;
use crate::video_model::FrameSequence;

/// Exhaustive block matching between consecutive frames.
///
/// For every `block`×`block` tile of frame `i-1` the displacement in
/// `[-radius, radius]²` minimizing the RGB sum of absolute differences against
/// frame `i` is written to every pixel of the tile. Candidates that leave the
/// frame are skipped; ties go to the smallest `|dy|+|dx|`, then scan order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyFlow {
    pub block: usize,
    pub radius: usize,
    pub execution: Execution,
}

impl Default for ToyFlow {
    fn default() -> Self {
        Self { block: 4, radius: 4, execution: Execution::default() }
    }
}

impl ToyFlow {
    fn match_pair(&self, prev: ArrayView3<f64>, cur: ArrayView3<f64>) -> Array3<f64> {
        let (h, w, _) = prev.dim();
        let r = self.radius as isize;
        let mut out = Array3::zeros((h, w, 2));
        for by in (0..h).step_by(self.block) {
            for bx in (0..w).step_by(self.block) {
                let (bh, bw) = ((h - by).min(self.block), (w - bx).min(self.block));
                let tile = prev.slice(s![by..by + bh, bx..bx + bw, ..]);
                let mut best: Option<(f64, isize, isize, isize)> = None;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (y0, x0) = (by as isize + dy, bx as isize + dx);
                        if y0 < 0 || x0 < 0 || y0 as usize + bh > h || x0 as usize + bw > w {
                            continue;
                        }
                        let (y0, x0) = (y0 as usize, x0 as usize);
                        let cand = cur.slice(s![y0..y0 + bh, x0..x0 + bw, ..]);
                        let sad: f64 = tile.iter().zip(cand.iter()).map(|(a, b)| (a - b).abs()).sum();
                        let dist = dy.abs() + dx.abs();
                        let better = match best {
                            None => true,
                            Some((bs, bd, _, _)) => sad < bs || (sad == bs && dist < bd),
                        };
                        if better {
                            best = Some((sad, dist, dy, dx));
                        }
                    }
                }
                let (_, _, dy, dx) = best.expect("zero displacement is always in bounds");
                let mut t = out.slice_mut(s![by..by + bh, bx..bx + bw, ..]);
                t.slice_mut(s![.., .., 0]).fill(dy as f64);
                t.slice_mut(s![.., .., 1]).fill(dx as f64);
            }
        }
        out
    }
}

impl FlowEstimator for ToyFlow {
    fn estimate(&self, frames: &FrameSequence) -> Result<FlowField, ProviderError> {
        let n = frames.len();
        if n < 2 {
            return Err(ProviderError::Input(format!("flow needs at least 2 frames, got {n}")));
        }
        let pairs = exec::map_indexed(self.execution, n - 1, |i| self.match_pair(frames.frame(i), frames.frame(i + 1)));
        let views: Vec<_> = pairs.iter().map(|p| p.view()).collect();
        let data = ndarray::stack(Axis(0), &views).map_err(|e| ProviderError::Shape(e.to_string()))?;
        FlowField::new(data).map_err(|e| ProviderError::Shape(e.to_string()))
    }
}

/// Min-max normalized luminance `0.299r + 0.587g + 0.114b`; constant frames
/// map to zeros.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyDepth;

pub fn luminance(frame: ArrayView3<f64>) -> Array2<f64> {
    frame.map_axis(Axis(2), |p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
}

impl DepthEstimator for ToyDepth {
    fn estimate(&self, frame: ArrayView3<f64>) -> Result<Array2<f64>, ProviderError> {
        if frame.dim().2 != 3 {
            return Err(ProviderError::Shape(format!("depth needs RGB frames, got {} channels", frame.dim().2)));
        }
        let lum = luminance(frame);
        let lo = lum.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = lum.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return Ok(Array2::zeros(lum.dim()));
        }
        Ok(lum.mapv(|v| (v - lo) / (hi - lo)))
    }
}

/// Fixed random projections of area-downsampled pixels (frames) and of the
/// mean token vector (text) into a shared space, normalized to unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEmbedder {
    pub grid: usize,
    text: ToyTextEncoder,
    frame_proj: Array2<f64>,
    text_proj: Array2<f64>,
}

impl ToyEmbedder {
    pub const WIDTH: usize = 32;

    pub fn new(seed: u64) -> Self {
        let grid = 8;
        let text = ToyTextEncoder::new(seed);
        let mut r = SeededRng::labelled(seed, "embedder");
        Self {
            grid,
            frame_proj: r.uniform_matrix(grid * grid * 3, Self::WIDTH, 1.0),
            text_proj: r.uniform_matrix(text.width, Self::WIDTH, 1.0),
            text,
        }
    }

    /// Mean of each of `grid × grid` pixel bins, row-major then channel.
    pub fn pool(&self, frame: ArrayView3<f64>) -> Array1<f64> {
        let (h, w, c) = frame.dim();
        let g = self.grid;
        let mut sums = Array3::<f64>::zeros((g, g, c));
        let mut counts = Array2::<f64>::zeros((g, g));
        for y in 0..h {
            for x in 0..w {
                let (gy, gx) = (y * g / h, x * g / w);
                counts[(gy, gx)] += 1.0;
                for ch in 0..c {
                    sums[(gy, gx, ch)] += frame[(y, x, ch)];
                }
            }
        }
        for ((gy, gx, _), v) in sums.indexed_iter_mut() {
            if counts[(gy, gx)] > 0.0 {
                *v /= counts[(gy, gx)];
            }
        }
        Array1::from_iter(sums.iter().copied())
    }
}

fn normalized(v: Array1<f64>) -> Result<Array1<f64>, ProviderError> {
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(ProviderError::Input("embedding has zero or non-finite norm".into()));
    }
    Ok(v / norm)
}

impl Embedder for ToyEmbedder {
    fn embed_frame(&self, frame: ArrayView3<f64>) -> Result<Array1<f64>, ProviderError> {
        if frame.dim().2 != 3 {
            return Err(ProviderError::Shape(format!("embedder needs RGB frames, got {} channels", frame.dim().2)));
        }
        normalized(self.pool(frame).dot(&self.frame_proj))
    }

    fn embed_text(&self, text: &str) -> Result<Array1<f64>, ProviderError> {
        normalized(self.text.mean_token_vector(text).dot(&self.text_proj))
    }
}

/// Pixels `[0,1]` → affine `[-1,1]` → `factor`×`factor` average pool → fixed
/// seeded lift `3 → channels`. Decoding applies the lift's right inverse,
/// nearest-neighbour upsampling and clamps back to `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLatentCodec {
    factor: usize,
    lift: Array2<f64>,
    unlift: Array2<f64>,
}

fn inverse3(m: &Array2<f64>) -> Option<Array2<f64>> {
    let c = |r: usize, k: usize| m[(r, k)];
    let det = c(0, 0) * (c(1, 1) * c(2, 2) - c(1, 2) * c(2, 1)) - c(0, 1) * (c(1, 0) * c(2, 2) - c(1, 2) * c(2, 0))
        + c(0, 2) * (c(1, 0) * c(2, 1) - c(1, 1) * c(2, 0));
    if det.abs() < 1e-3 {
        return None;
    }
    let mut inv = Array2::zeros((3, 3));
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (k0, k1) = ((i + 1) % 3, (i + 2) % 3);
            inv[(i, j)] = (c(r0, k0) * c(r1, k1) - c(r0, k1) * c(r1, k0)) / det;
        }
    }
    Some(inv)
}

impl ToyLatentCodec {
    pub const CHANNELS: usize = 4;

    pub fn new(seed: u64) -> Self {
        let mut r = SeededRng::labelled(seed, "codec");
        loop {
            let lift = r.uniform_matrix(3, Self::CHANNELS, 1.0);
            if let Some(gram_inv) = inverse3(&lift.dot(&lift.t())) {
                let unlift = lift.t().dot(&gram_inv);
                return Self { factor: 4, lift, unlift };
            }
        }
    }

    pub fn lift(&self) -> &Array2<f64> {
        &self.lift
    }
}

impl LatentCodec for ToyLatentCodec {
    fn encode(&self, frames: &FrameSequence) -> Result<Array4<f64>, ProviderError> {
        let (n, h, w, _) = frames.data().dim();
        let f = self.factor;
        if h % f != 0 || w % f != 0 {
            return Err(ProviderError::Shape(format!("frame size {h}x{w} not divisible by {f}")));
        }
        let (lh, lw) = (h / f, w / f);
        let mut out = Array4::zeros((n, lh, lw, Self::CHANNELS));
        for i in 0..n {
            for y in 0..lh {
                for x in 0..lw {
                    let cell = frames.data().slice(s![i, y * f..(y + 1) * f, x * f..(x + 1) * f, ..]);
                    let rgb = cell.mean_axis(Axis(0)).unwrap().mean_axis(Axis(0)).unwrap().mapv(|p| 2.0 * p - 1.0);
                    out.slice_mut(s![i, y, x, ..]).assign(&rgb.dot(&self.lift));
                }
            }
        }
        Ok(out)
    }

    fn decode(&self, latents: &Array4<f64>) -> Result<FrameSequence, ProviderError> {
        let (n, lh, lw, c) = latents.dim();
        if c != Self::CHANNELS {
            return Err(ProviderError::Shape(format!("codec expects {} latent channels, got {c}", Self::CHANNELS)));
        }
        let f = self.factor;
        let mut out = Array4::zeros((n, lh * f, lw * f, 3));
        for i in 0..n {
            for y in 0..lh {
                for x in 0..lw {
                    let rgb = latents.slice(s![i, y, x, ..]).dot(&self.unlift).mapv(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0));
                    for px in out.slice_mut(s![i, y * f..(y + 1) * f, x * f..(x + 1) * f, ..]).lanes_mut(Axis(2)) {
                        let mut px = px;
                        px.assign(&rgb);
                    }
                }
            }
        }
        FrameSequence::new(out, None).map_err(|e| ProviderError::Shape(e.to_string()))
    }

    fn factor(&self) -> usize {
        self.factor
    }

    fn channels(&self) -> usize {
        Self::CHANNELS
    }
}
