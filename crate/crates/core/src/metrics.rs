//! Automatic edit-quality metrics over an abstract embedder.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::exec::{self, Execution};
use crate::providers::{Embedder, ProviderError};
use crate::video_model::FrameSequence;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("frame consistency needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("embedding widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("embedding has zero norm")]
    ZeroNorm,
    #[error("embedder failed: {0}")]
    Embedder(#[from] ProviderError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub text_align: f64,
    pub frame_consistency: f64,
    pub per_frame_alignments: Vec<f64>,
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::WidthMismatch(a.len(), b.len()));
    }
    let (na, nb) = (a.dot(a).sqrt(), b.dot(b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(MetricError::ZeroNorm);
    }
    Ok(a.dot(b) / (na * nb))
}

pub fn embed_frames(exec: Execution, frames: &FrameSequence, embedder: &dyn Embedder) -> Result<Vec<Array1<f64>>, MetricError> {
    exec::try_map_indexed(exec, frames.len(), |i| embedder.embed_frame(frames.frame(i)).map_err(MetricError::from))
}

/// Mean cosine over unordered pairs `i < j`. Row sums are formed
/// independently and then added in index order, so the result does not
/// depend on the execution mode.
pub fn mean_pairwise_cosine(exec: Execution, embeddings: &[Array1<f64>]) -> Result<f64, MetricError> {
    let n = embeddings.len();
    if n < 2 {
        return Err(MetricError::TooFewFrames(n));
    }
    let rows = exec::try_map_indexed(exec, n, |i| {
        (i + 1..n).map(|j| cosine(&embeddings[i], &embeddings[j])).sum::<Result<f64, _>>()
    })?;
    let pairs = n * (n - 1) / 2;
    Ok(rows.iter().sum::<f64>() / pairs as f64)
}

/// Per-frame cosine to the prompt embedding.
pub fn per_frame_alignments(
    exec: Execution,
    frames: &FrameSequence,
    prompt: &str,
    embedder: &dyn Embedder,
) -> Result<Vec<f64>, MetricError> {
    let text = embedder.embed_text(prompt)?;
    embed_frames(exec, frames, embedder)?.iter().map(|f| cosine(&text, f)).collect()
}

pub fn text_alignment(frames: &FrameSequence, prompt: &str, embedder: &dyn Embedder) -> Result<f64, MetricError> {
    let per = per_frame_alignments(Execution::default(), frames, prompt, embedder)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub fn frame_consistency(frames: &FrameSequence, embedder: &dyn Embedder) -> Result<f64, MetricError> {
    if frames.len() < 2 {
        return Err(MetricError::TooFewFrames(frames.len()));
    }
    mean_pairwise_cosine(Execution::default(), &embed_frames(Execution::default(), frames, embedder)?)
}

/// Both metrics from one embedding pass.
pub fn evaluate(
    frames: &FrameSequence,
    prompt: &str,
    embedder: &dyn Embedder,
    exec: Execution,
) -> Result<MetricReport, MetricError> {
    if frames.len() < 2 {
        return Err(MetricError::TooFewFrames(frames.len()));
    }
    let embeddings = embed_frames(exec, frames, embedder)?;
    let text = embedder.embed_text(prompt)?;
    let per_frame_alignments = embeddings.iter().map(|f| cosine(&text, f)).collect::<Result<Vec<_>, _>>()?;
    Ok(MetricReport {
        text_align: per_frame_alignments.iter().sum::<f64>() / per_frame_alignments.len() as f64,
        frame_consistency: mean_pairwise_cosine(exec, &embeddings)?,
        per_frame_alignments,
    })
}
