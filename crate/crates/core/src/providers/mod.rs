//! Model provider interfaces and the string-keyed registry that binds them.
//!
//! Every external model the editor needs (text encoder, flow, depth,
//! similarity embedder, latent codec, denoiser backbone, control branch) sits
//! behind a trait here. The `toy` implementations are small seeded stand-ins
//! that make the whole pipeline runnable without pretrained weights.

mod toy_backbone;
mod toy_text;
mod toy_vision;

use std::path::PathBuf;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::attention::{ContextMode, GateParams, GroundingMLP};
use crate::control::ControlResiduals;
use crate::diffusion::{DiffusionError, FrameDenoiser, Pullback};
use crate::exec::Execution;
use crate::flow_smoothing::FlowField;
use crate::rng::derive_seed;
use crate::video_model::FrameSequence;

pub use toy_backbone::{ToyBackboneConfig, ToyControlBranch, ToyDenoiser, ToyLevel, ToyStem};
pub use toy_text::ToyTextEncoder;
pub use toy_vision::{ToyDepth, ToyEmbedder, ToyFlow, ToyLatentCodec};

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("no provider {kind:?} for slot {slot}")]
    UnknownKind { slot: String, kind: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("weights {path}: {reason}")]
    Weights { path: PathBuf, reason: String },
}

impl From<ProviderError> for DiffusionError {
    fn from(e: ProviderError) -> Self {
        DiffusionError::Denoiser(e.to_string())
    }
}

pub trait TextEncoder: Send + Sync {
    /// Context embedding `[L, d_ctx]`.
    fn encode(&self, text: &str) -> Result<Array2<f64>, ProviderError>;
    /// A single phrase vector `[d_ctx]` for grounding tokens.
    fn encode_phrase(&self, phrase: &str) -> Result<Array1<f64>, ProviderError>;
    fn width(&self) -> usize;
    fn length(&self) -> usize;
}

pub trait FlowEstimator: Send + Sync {
    /// Flow for each consecutive pair, `[N-1, H, W, 2]`.
    fn estimate(&self, frames: &FrameSequence) -> Result<FlowField, ProviderError>;
}

pub trait DepthEstimator: Send + Sync {
    /// Depth map `[H, W]` in `[0, 1]`.
    fn estimate(&self, frame: ArrayView3<f64>) -> Result<Array2<f64>, ProviderError>;
}

pub trait Embedder: Send + Sync {
    fn embed_frame(&self, frame: ArrayView3<f64>) -> Result<Array1<f64>, ProviderError>;
    fn embed_text(&self, text: &str) -> Result<Array1<f64>, ProviderError>;
}

pub trait LatentCodec: Send + Sync {
    fn encode(&self, frames: &FrameSequence) -> Result<Array4<f64>, ProviderError>;
    fn decode(&self, latents: &Array4<f64>) -> Result<FrameSequence, ProviderError>;
    /// Spatial downsampling factor between pixels and latents.
    fn factor(&self) -> usize;
    fn channels(&self) -> usize;
}

/// One clip-level backbone call.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseRequest<'a> {
    /// `[N, h, w, c]`.
    pub latents: &'a Array4<f64>,
    pub t: usize,
    /// `[N, L, d_ctx]`, one context per frame.
    pub contexts: &'a Array3<f64>,
    pub mode: ContextMode,
    /// Grounding tokens `[N, M, d_model]`.
    pub grounding: Option<&'a Array3<f64>>,
    pub residuals: Option<&'a ControlResiduals>,
}

/// Cotangent on the prediction `[N, h, w, c]` → gradient on contexts `[N, L, d]`.
pub type ClipPullback<'a> = Box<dyn FnOnce(&Array4<f64>) -> Array3<f64> + 'a>;

pub trait VideoDenoiser: Send + Sync {
    fn predict(&self, req: &DenoiseRequest) -> Result<Array4<f64>, ProviderError>;

    fn predict_with_pullback<'a>(
        &'a self,
        req: &DenoiseRequest,
    ) -> Result<(Array4<f64>, ClipPullback<'a>), ProviderError>;

    /// Residual shapes accepted for an `[n, h, w, _]` latent clip, in
    /// injection order.
    fn injection_sites(&self, n: usize, h: usize, w: usize) -> Vec<[usize; 4]>;

    /// Width of grounding tokens.
    fn model_width(&self) -> usize;
}

pub trait ControlBranch: Send + Sync {
    fn condition_channels(&self) -> usize;

    /// Residuals for the backbone's injection sites. `conditions` is
    /// `[N, h, w, condition_channels]` on the latent grid.
    fn residuals(
        &self,
        latents: &Array4<f64>,
        t: usize,
        contexts: &Array3<f64>,
        mode: ContextMode,
        conditions: &Array4<f64>,
    ) -> Result<ControlResiduals, ProviderError>;
}

/// Runs a clip backbone on one frame at a time with no grounding or
/// residuals, as used by inversion and null-text optimization.
pub struct PerFrame<'a>(pub &'a dyn VideoDenoiser);

impl PerFrame<'_> {
    fn request<'r>(z: &'r Array4<f64>, t: usize, ctx: &'r Array3<f64>) -> DenoiseRequest<'r> {
        DenoiseRequest { latents: z, t, contexts: ctx, mode: ContextMode::Cond, grounding: None, residuals: None }
    }
}

impl FrameDenoiser for PerFrame<'_> {
    fn predict(&self, z: &Array3<f64>, t: usize, context: &Array2<f64>) -> Result<Array3<f64>, DiffusionError> {
        let z4 = z.clone().insert_axis(ndarray::Axis(0));
        let c3 = context.clone().insert_axis(ndarray::Axis(0));
        let out = self.0.predict(&Self::request(&z4, t, &c3))?;
        Ok(out.index_axis_move(ndarray::Axis(0), 0))
    }

    fn predict_with_pullback<'a>(
        &'a self,
        z: &Array3<f64>,
        t: usize,
        context: &Array2<f64>,
    ) -> Result<(Array3<f64>, Pullback<'a>), DiffusionError> {
        let z4 = z.clone().insert_axis(ndarray::Axis(0));
        let c3 = context.clone().insert_axis(ndarray::Axis(0));
        let (out, pull) = self.0.predict_with_pullback(&Self::request(&z4, t, &c3))?;
        let pullback: Pullback<'a> = Box::new(move |cot: &Array3<f64>| {
            let cot4 = cot.clone().insert_axis(ndarray::Axis(0));
            pull(&cot4).index_axis_move(ndarray::Axis(0), 0)
        });
        Ok((out.index_axis_move(ndarray::Axis(0), 0), pullback))
    }
}

/// Implementation key plus optional seed override and weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSpec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    /// Half-width of the uniform weight initialization for seeded backbones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_bound: Option<f64>,
}

impl Default for ProviderSpec {
    fn default() -> Self {
        Self { kind: "toy".into(), seed: None, weights: None, init_bound: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProvidersConfig {
    pub text_encoder: ProviderSpec,
    pub flow_estimator: ProviderSpec,
    pub depth_estimator: ProviderSpec,
    pub embedder: ProviderSpec,
    pub codec: ProviderSpec,
    pub denoiser: ProviderSpec,
    pub control_branch: ProviderSpec,
}

/// Settings the registry needs from outside the providers section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistryOptions {
    pub seed: u64,
    pub gate: GateParams,
    pub fourier_freqs: usize,
    pub condition_channels: usize,
    pub execution: Execution,
}

impl Default for RegistryOptions {
    fn default() -> Self {
        Self { seed: 42, gate: GateParams::default(), fourier_freqs: 8, condition_channels: 1, execution: Execution::default() }
    }
}

/// Resolved provider bindings.
#[derive(Clone)]
pub struct ProviderRegistry {
    pub text_encoder: Arc<dyn TextEncoder>,
    pub flow_estimator: Arc<dyn FlowEstimator>,
    pub depth_estimator: Arc<dyn DepthEstimator>,
    pub embedder: Arc<dyn Embedder>,
    pub codec: Arc<dyn LatentCodec>,
    pub denoiser: Arc<dyn VideoDenoiser>,
    pub control_branch: Arc<dyn ControlBranch>,
    pub grounding_mlp: Arc<GroundingMLP>,
}

impl std::fmt::Debug for ProviderRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProviderRegistry").finish_non_exhaustive()
    }
}

fn check_kind(slot: &str, spec: &ProviderSpec) -> Result<(), ProviderError> {
    if spec.kind != "toy" {
        return Err(ProviderError::UnknownKind { slot: slot.into(), kind: spec.kind.clone() });
    }
    Ok(())
}

fn no_weights(slot: &str, spec: &ProviderSpec) -> Result<(), ProviderError> {
    match &spec.weights {
        Some(p) => Err(ProviderError::Weights { path: p.clone(), reason: format!("{slot} provider takes no weights") }),
        None => Ok(()),
    }
}

impl ProviderRegistry {
    /// Every slot bound to its toy implementation.
    pub fn toy(opts: RegistryOptions) -> Self {
        Self::resolve(&ProvidersConfig::default(), opts).expect("toy providers always resolve")
    }

    pub fn resolve(cfg: &ProvidersConfig, opts: RegistryOptions) -> Result<Self, ProviderError> {
        let seed_for = |slot: &str, spec: &ProviderSpec| spec.seed.unwrap_or_else(|| derive_seed(opts.seed, slot));
        let slots = [
            ("text_encoder", &cfg.text_encoder),
            ("flow_estimator", &cfg.flow_estimator),
            ("depth_estimator", &cfg.depth_estimator),
            ("embedder", &cfg.embedder),
            ("codec", &cfg.codec),
            ("denoiser", &cfg.denoiser),
            ("control_branch", &cfg.control_branch),
        ];
        for (slot, spec) in slots {
            check_kind(slot, spec)?;
            if slot != "denoiser" && slot != "control_branch" {
                no_weights(slot, spec)?;
            }
            if let Some(b) = spec.init_bound {
                if !(b.is_finite() && b >= 0.0) {
                    return Err(ProviderError::Input(format!("{slot}: init_bound must be finite and non-negative, got {b}")));
                }
            }
        }

        let text = ToyTextEncoder::new(seed_for("text_encoder", &cfg.text_encoder));
        let backbone = ToyBackboneConfig { gate: opts.gate, ..ToyBackboneConfig::default() };
        let with_bound = |spec: &ProviderSpec| ToyBackboneConfig {
            init_bound: spec.init_bound.unwrap_or(backbone.init_bound),
            ..backbone
        };
        let denoiser = match &cfg.denoiser.weights {
            Some(p) => ToyDenoiser::load(p, backbone)?,
            None => ToyDenoiser::seeded(seed_for("denoiser", &cfg.denoiser), with_bound(&cfg.denoiser)),
        };
        let control = match &cfg.control_branch.weights {
            Some(p) => ToyControlBranch::load(p, backbone, opts.condition_channels)?,
            None => ToyControlBranch::seeded(
                seed_for("control_branch", &cfg.control_branch),
                with_bound(&cfg.control_branch),
                opts.condition_channels,
            ),
        };
        let mlp = GroundingMLP::seeded(
            derive_seed(opts.seed, "grounding"),
            text.width(),
            opts.fourier_freqs,
            backbone.d_model,
            backbone.d_model,
            backbone.init_bound,
        );
        Ok(Self {
            text_encoder: Arc::new(text),
            flow_estimator: Arc::new(ToyFlow { execution: opts.execution, ..ToyFlow::default() }),
            depth_estimator: Arc::new(ToyDepth),
            embedder: Arc::new(ToyEmbedder::new(seed_for("embedder", &cfg.embedder))),
            codec: Arc::new(ToyLatentCodec::new(seed_for("codec", &cfg.codec))),
            denoiser: Arc::new(denoiser),
            control_branch: Arc::new(control),
            grounding_mlp: Arc::new(mlp),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_kind_is_reported() {
        let mut cfg = ProvidersConfig::default();
        cfg.flow_estimator.kind = "raft".into();
        match ProviderRegistry::resolve(&cfg, RegistryOptions::default()) {
            Err(ProviderError::UnknownKind { slot, kind }) => {
                assert_eq!(slot, "flow_estimator");
                assert_eq!(kind, "raft");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_parses_with_defaults() {
        let cfg: ProvidersConfig = serde_json::from_str(r#"{"denoiser": {"kind": "toy", "seed": 7}}"#).unwrap();
        assert_eq!(cfg.denoiser.seed, Some(7));
        assert_eq!(cfg.text_encoder, ProviderSpec::default());
        assert!(serde_json::from_str::<ProvidersConfig>(r#"{"bogus": {}}"#).is_err());
    }
}
