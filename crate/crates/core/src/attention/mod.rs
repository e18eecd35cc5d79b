//! Inflated and modulated attention.
//!
//! * spatial-temporal self-attention: queries from one frame, keys/values from
//!   every frame of the clip;
//! * modulated cross-attention: the unconditional branch attends over the
//!   concatenation of all frames' null contexts;
//! * cross-frame gated attention: joint visual + grounding tokens gathered
//!   across frames, token-sliced back to the visual rows and added through a
//!   `scale·tanh(γ)` gate.
//!
//! Row-vector convention throughout: tokens are rows, `Q = X·W_Q`.

mod grounding;

pub use grounding::{build_grounding_tokens, fourier_embed, GroundingMLP};

use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::rng::SeededRng;
use crate::tensor_io::{self, TensorIoError};

#[derive(Debug, thiserror::Error)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid attention mode {0:?} (expected \"cond\" or \"uncond\")")]
    InvalidMode(String),
    #[error("fourier frequency count must be at least 1")]
    NoFrequencies,
    #[error("text encoder failed: {0}")]
    Encoder(String),
    #[error(transparent)]
    Io(#[from] TensorIoError),
}

fn shape_err(msg: impl Into<String>) -> AttentionError {
    AttentionError::Shape(msg.into())
}

/// Which prediction branch a cross-attention call serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    /// Frame `i` attends to its own context only.
    Cond,
    /// Frame `i` attends to every frame's context, concatenated along tokens.
    Uncond,
}

impl FromStr for ContextMode {
    type Err = AttentionError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cond" => Ok(ContextMode::Cond),
            "uncond" => Ok(ContextMode::Uncond),
            other => Err(AttentionError::InvalidMode(other.to_string())),
        }
    }
}

/// Projection matrices for multi-head attention.
///
/// `wq: [d_q, inner]`, `wk, wv: [d_kv, inner]`, `wo: [inner, d_q]` with
/// `inner = heads · head_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn new(
        wq: Array2<f64>,
        wk: Array2<f64>,
        wv: Array2<f64>,
        wo: Array2<f64>,
        heads: usize,
    ) -> Result<Self, AttentionError> {
        let inner = wq.ncols();
        if heads == 0 || !inner.is_multiple_of(heads) {
            return Err(shape_err(format!("inner width {inner} not divisible by {heads} heads")));
        }
        if wk.ncols() != inner || wv.ncols() != inner || wo.nrows() != inner {
            return Err(shape_err("projection inner widths disagree"));
        }
        if wk.nrows() != wv.nrows() {
            return Err(shape_err("key and value input widths disagree"));
        }
        if wo.ncols() != wq.nrows() {
            return Err(shape_err(format!("output width {} != query width {}", wo.ncols(), wq.nrows())));
        }
        Ok(Self { wq, wk, wv, wo, heads })
    }

    /// Uniform(-bound, bound) initialisation from a labelled seed stream.
    pub fn seeded(seed: u64, label: &str, d_model: usize, d_kv: usize, heads: usize, bound: f64) -> Self {
        let mut r = SeededRng::labelled(seed, label);
        let wq = r.uniform_matrix(d_model, d_model, bound);
        let wk = r.uniform_matrix(d_kv, d_model, bound);
        let wv = r.uniform_matrix(d_kv, d_model, bound);
        let wo = r.uniform_matrix(d_model, d_model, bound);
        Self::new(wq, wk, wv, wo, heads).expect("seeded shapes are consistent")
    }

    pub fn zeros(d_model: usize, d_kv: usize, heads: usize) -> Self {
        let z = |r, c| Array2::zeros((r, c));
        Self::new(z(d_model, d_model), z(d_kv, d_model), z(d_kv, d_model), z(d_model, d_model), heads)
            .expect("zero shapes are consistent")
    }

    pub fn model_width(&self) -> usize {
        self.wq.nrows()
    }

    pub fn kv_width(&self) -> usize {
        self.wk.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.wq.ncols() / self.heads
    }

    /// Writes `wq, wk, wv, wo` in the matrix-sequence weights format.
    pub fn write(&self, path: &Path) -> Result<(), AttentionError> {
        Ok(tensor_io::write_matrices(path, &[&self.wq, &self.wk, &self.wv, &self.wo])?)
    }

    pub fn read(path: &Path, heads: usize) -> Result<Self, AttentionError> {
        let mut mats = tensor_io::read_matrices(path)?;
        if mats.len() != 4 {
            return Err(shape_err(format!("{}: expected 4 matrices, found {}", path.display(), mats.len())));
        }
        let wo = mats.pop().unwrap();
        let wv = mats.pop().unwrap();
        let wk = mats.pop().unwrap();
        let wq = mats.pop().unwrap();
        Self::new(wq, wk, wv, wo, heads)
    }

    pub(crate) fn bind(&self, g: &mut Graph) -> BoundAttention {
        BoundAttention {
            wq: g.constant(self.wq.clone()),
            wk: g.constant(self.wk.clone()),
            wv: g.constant(self.wv.clone()),
            wo: g.constant(self.wo.clone()),
            heads: self.heads,
            head_dim: self.head_dim(),
        }
    }
}

/// The gated residual `z + scale·tanh(gamma)·attn`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub gamma: f64,
    pub scale: f64,
}

impl GateParams {
    pub fn factor(&self) -> f64 {
        self.scale * self.gamma.tanh()
    }
}

impl Default for GateParams {
    fn default() -> Self {
        Self { gamma: 0.5, scale: 1.0 }
    }
}

/// Attention weights registered as constants on a [`Graph`].
pub(crate) struct BoundAttention {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
    head_dim: usize,
}

impl BoundAttention {
    pub(crate) fn project_kv(&self, g: &mut Graph, x_kv: Var) -> (Var, Var) {
        (g.matmul(x_kv, self.wk), g.matmul(x_kv, self.wv))
    }

    /// Multi-head `softmax(Q·Kᵀ/√d)·V`, heads concatenated, then `W_O`.
    pub(crate) fn attend(&self, g: &mut Graph, x_q: Var, k: Var, v: Var) -> Var {
        let q = g.matmul(x_q, self.wq);
        let inv_sqrt_d = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * self.head_dim, (h + 1) * self.head_dim);
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(k, lo, hi);
            let vh = g.slice_cols(v, lo, hi);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, inv_sqrt_d);
            let probs = g.softmax_rows(scores);
            heads.push(g.matmul(probs, vh));
        }
        let joined = g.concat_cols(&heads);
        g.matmul(joined, self.wo)
    }
}

pub(crate) fn st_self_attention_g(g: &mut Graph, w: &BoundAttention, frames: &[Var]) -> Vec<Var> {
    let all = g.concat_rows(frames);
    let (k, v) = w.project_kv(g, all);
    frames.iter().map(|&f| w.attend(g, f, k, v)).collect()
}

/// Modulated cross-attention for every frame of the clip at once.
pub(crate) fn modulated_cross_attention_g(
    g: &mut Graph,
    w: &BoundAttention,
    frames: &[Var],
    contexts: &[Var],
    mode: ContextMode,
) -> Vec<Var> {
    match mode {
        ContextMode::Cond => frames
            .iter()
            .zip(contexts)
            .map(|(&f, &c)| {
                let (k, v) = w.project_kv(g, c);
                w.attend(g, f, k, v)
            })
            .collect(),
        ContextMode::Uncond => {
            let all = g.concat_rows(contexts);
            let (k, v) = w.project_kv(g, all);
            frames.iter().map(|&f| w.attend(g, f, k, v)).collect()
        }
    }
}

pub(crate) fn cross_frame_gated_g(
    g: &mut Graph,
    w: &BoundAttention,
    frames: &[Var],
    grounding: &[Var],
    gate: GateParams,
) -> Vec<Var> {
    let factor = gate.factor();
    if grounding.is_empty() || factor == 0.0 || g.shape(grounding[0]).0 == 0 {
        return frames.to_vec();
    }
    let joint: Vec<Var> = frames.iter().zip(grounding).map(|(&z, &u)| g.concat_rows(&[z, u])).collect();
    let all = g.concat_rows(&joint);
    let (k, v) = w.project_kv(g, all);
    frames
        .iter()
        .zip(&joint)
        .map(|(&z, &j)| {
            let p = g.shape(z).0;
            let out = w.attend(g, j, k, v);
            let sliced = g.slice_rows(out, 0, p);
            let gated = g.scale(sliced, factor);
            g.add(z, gated)
        })
        .collect()
}

fn frames_of(g: &mut Graph, z: &Array3<f64>) -> Vec<Var> {
    z.outer_iter().map(|f| g.constant(f.to_owned())).collect()
}

fn collect_frames(g: &Graph, outs: &[Var]) -> Array3<f64> {
    let views: Vec<_> = outs.iter().map(|&v| g.value(v).view()).collect();
    ndarray::stack(Axis(0), &views).expect("uniform frame shapes")
}

fn check_width(what: &str, got: usize, want: usize) -> Result<(), AttentionError> {
    if got != want {
        return Err(shape_err(format!("{what} width {got}, weights expect {want}")));
    }
    Ok(())
}

/// Vanilla single-sequence self-attention `[P, D] → [P, D]`.
pub fn self_attention(x: &Array2<f64>, w: &AttentionWeights) -> Result<Array2<f64>, AttentionError> {
    check_width("token", x.ncols(), w.model_width())?;
    check_width("token (as key)", x.ncols(), w.kv_width())?;
    let mut g = Graph::new();
    let b = w.bind(&mut g);
    let xv = g.constant(x.clone());
    let (k, v) = b.project_kv(&mut g, xv);
    let out = b.attend(&mut g, xv, k, v);
    Ok(g.value(out).clone())
}

/// Vanilla cross-attention of `[P, D]` tokens over a `[L, d_ctx]` context.
pub fn cross_attention(x: &Array2<f64>, context: &Array2<f64>, w: &AttentionWeights) -> Result<Array2<f64>, AttentionError> {
    check_width("token", x.ncols(), w.model_width())?;
    check_width("context", context.ncols(), w.kv_width())?;
    let mut g = Graph::new();
    let b = w.bind(&mut g);
    let xv = g.constant(x.clone());
    let cv = g.constant(context.clone());
    let (k, v) = b.project_kv(&mut g, cv);
    let out = b.attend(&mut g, xv, k, v);
    Ok(g.value(out).clone())
}

/// Spatial-temporal self-attention over a clip `[N, P, D]`.
pub fn spatial_temporal_self_attention(z: &Array3<f64>, w: &AttentionWeights) -> Result<Array3<f64>, AttentionError> {
    check_width("token", z.dim().2, w.model_width())?;
    check_width("token (as key)", z.dim().2, w.kv_width())?;
    if z.dim().0 == 0 {
        return Ok(z.clone());
    }
    let mut g = Graph::new();
    let b = w.bind(&mut g);
    let frames = frames_of(&mut g, z);
    let outs = st_self_attention_g(&mut g, &b, &frames);
    Ok(collect_frames(&g, &outs))
}

/// Modulated cross-attention for frame `i`: `contexts` is `[N, L, d_ctx]`.
pub fn modulated_cross_attention(
    z_i: &Array2<f64>,
    contexts: &Array3<f64>,
    frame_index: usize,
    mode: ContextMode,
    w: &AttentionWeights,
) -> Result<Array2<f64>, AttentionError> {
    check_width("token", z_i.ncols(), w.model_width())?;
    check_width("context", contexts.dim().2, w.kv_width())?;
    if frame_index >= contexts.dim().0 {
        return Err(shape_err(format!("frame index {frame_index} with {} contexts", contexts.dim().0)));
    }
    match mode {
        ContextMode::Cond => cross_attention(z_i, &contexts.index_axis(Axis(0), frame_index).to_owned(), w),
        ContextMode::Uncond => {
            let (n, l, d) = contexts.dim();
            let merged = contexts.to_shape((n * l, d)).expect("contiguous reshape").to_owned();
            cross_attention(z_i, &merged, w)
        }
    }
}

/// Cross-frame gated attention: `z` is `[N, P, D]`, `u` is `[N, M, D]`.
pub fn cross_frame_gated_attention(
    z: &Array3<f64>,
    u: &Array3<f64>,
    gate: GateParams,
    w: &AttentionWeights,
) -> Result<Array3<f64>, AttentionError> {
    let (n, _, d) = z.dim();
    let (nu, m, du) = u.dim();
    if nu != n {
        return Err(shape_err(format!("{n} frames of latents but {nu} of grounding tokens")));
    }
    if m > 0 && du != d {
        return Err(shape_err(format!("grounding token width {du} != latent width {d}")));
    }
    check_width("token", d, w.model_width())?;
    check_width("token (as key)", d, w.kv_width())?;
    if m == 0 || gate.factor() == 0.0 || n == 0 {
        return Ok(z.clone());
    }
    let mut g = Graph::new();
    let b = w.bind(&mut g);
    let frames = frames_of(&mut g, z);
    let tokens = frames_of(&mut g, u);
    let outs = cross_frame_gated_g(&mut g, &b, &frames, &tokens, gate);
    Ok(collect_frames(&g, &outs))
}

/// Keeps the first `visual_count` rows of a joint token matrix.
pub fn token_slice(joint: &Array2<f64>, visual_count: usize) -> Result<Array2<f64>, AttentionError> {
    if visual_count > joint.nrows() {
        return Err(shape_err(format!("cannot slice {visual_count} rows from {}", joint.nrows())));
    }
    Ok(joint.slice(s![..visual_count, ..]).to_owned())
}
