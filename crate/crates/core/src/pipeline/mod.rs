//! End-to-end editing: encode, per-frame inversion and null-text
//! optimization, flow smoothing, grounded and controlled guided denoising
//! with optional inpainting, decode.

mod config;
mod manifest;
mod mask;

pub use config::{DiffusionConfig, GroundingConfig, PipelineConfig, SeedConfig, SmoothingConfig};
pub use manifest::{digest_path, load_config, InputDigest, Manifest, MANIFEST_VERSION};
pub use mask::{derive_inpaint_mask, InpaintMask};

use std::fmt;

use ndarray::{Array2, Array3, Array4, Axis, Zip};

use crate::attention::{build_grounding_tokens, ContextMode};
use crate::control::{control_residuals, scale_residuals, ConditionKind, ConditionMaps, ControlResiduals};
use crate::diffusion::{
    cfg_predict, ddim_invert_frame, ddim_step, optimize_null_embeddings, InversionTrajectory, NoiseSchedule,
    NullOptReport, NullTrajectory,
};
use crate::exec;
use crate::flow_smoothing::{masks_from_flow, smooth_latents};
use crate::providers::{DenoiseRequest, PerFrame, ProviderRegistry};
use crate::video_model::{apply_edit_spec, validate_grounding, DepthSequence, EditSpec, FrameSequence, VideoGrounding};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Validation,
    Providers,
    Encode,
    Inversion,
    NullOptimization,
    Smoothing,
    Grounding,
    Control,
    Denoising,
    Decode,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Validation => "validation",
            Stage::Providers => "providers",
            Stage::Encode => "encode",
            Stage::Inversion => "inversion",
            Stage::NullOptimization => "null_optimization",
            Stage::Smoothing => "smoothing",
            Stage::Grounding => "grounding",
            Stage::Control => "control",
            Stage::Denoising => "denoising",
            Stage::Decode => "decode",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineError {
    pub stage: Stage,
    pub frame: Option<usize>,
    pub message: String,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.frame {
            Some(i) => write!(f, "{} stage failed on frame {i}: {}", self.stage, self.message),
            None => write!(f, "{} stage failed: {}", self.stage, self.message),
        }
    }
}

impl std::error::Error for PipelineError {}

impl PipelineError {
    pub fn new(stage: Stage, frame: Option<usize>, message: impl Into<String>) -> Self {
        Self { stage, frame, message: message.into() }
    }

    /// Whether the failure is caused by the inputs or configuration rather
    /// than by a computation.
    pub fn is_validation(&self) -> bool {
        self.stage == Stage::Validation
    }
}

fn stage_err<E: fmt::Display>(stage: Stage, frame: Option<usize>) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::new(stage, frame, e.to_string())
}

/// Per-frame inversion results for a clip.
#[derive(Debug, Clone)]
pub struct InversionOutput {
    /// Encoded source latents `[N, h, w, c]`.
    pub clean: Array4<f64>,
    pub trajectories: Vec<InversionTrajectory>,
    pub nulls: NullTrajectory,
    pub reports: Vec<NullOptReport>,
}

impl InversionOutput {
    /// Trajectory entry `k` of every frame, stacked to `[N, h, w, c]`.
    pub fn latents_at(&self, k: usize) -> Array4<f64> {
        let views: Vec<_> = self.trajectories.iter().map(|t| t.latents[k].view()).collect();
        ndarray::stack(Axis(0), &views).expect("frames share latent shape")
    }

    pub fn noisiest(&self) -> Array4<f64> {
        self.latents_at(self.trajectories[0].len() - 1)
    }
}

#[derive(Debug, Clone)]
pub struct EditOutput {
    pub frames: FrameSequence,
    /// Final clean latents before decoding.
    pub latents: Array4<f64>,
    pub inversion: InversionOutput,
    pub mask: Option<InpaintMask>,
    pub unmatched_phrases: Vec<String>,
}

/// A configured pipeline with resolved providers.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    schedule: NoiseSchedule,
    registry: ProviderRegistry,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let registry = config.registry()?;
        Self::with_registry(config, registry)
    }

    pub fn with_registry(config: PipelineConfig, registry: ProviderRegistry) -> Result<Self, PipelineError> {
        config.validate()?;
        let schedule = config.schedule()?;
        Ok(Self { config, schedule, registry })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn registry(&self) -> &ProviderRegistry {
        &self.registry
    }

    fn latent_grid(&self, frames: &FrameSequence) -> Result<(usize, usize), PipelineError> {
        let f = self.registry.codec.factor();
        let (h, w) = (frames.height(), frames.width());
        if h % (2 * f) != 0 || w % (2 * f) != 0 {
            return Err(PipelineError::new(
                Stage::Validation,
                None,
                format!("frame size {h}x{w} must be a multiple of {} in both directions", 2 * f),
            ));
        }
        Ok((h / f, w / f))
    }

    pub fn encode(&self, frames: &FrameSequence) -> Result<Array4<f64>, PipelineError> {
        self.latent_grid(frames)?;
        self.registry.codec.encode(frames).map_err(stage_err(Stage::Encode, None))
    }

    /// Encodes, inverts every frame with the source prompt, then optimizes
    /// each frame's null contexts.
    pub fn invert(&self, frames: &FrameSequence, source_prompt: &str) -> Result<InversionOutput, PipelineError> {
        let clean = self.encode(frames)?;
        let text = &self.registry.text_encoder;
        let cond = text.encode(source_prompt).map_err(stage_err(Stage::Inversion, None))?;
        let null = text.encode("").map_err(stage_err(Stage::NullOptimization, None))?;
        let denoiser = PerFrame(self.registry.denoiser.as_ref());
        let exec = self.config.execution;
        let n = clean.dim().0;

        log::info!("inverting {n} frames over {} steps", self.schedule.num_inference_steps());
        let trajectories = exec::try_map_indexed(exec, n, |i| {
            ddim_invert_frame(&clean.index_axis(Axis(0), i).to_owned(), &denoiser, &cond, &self.schedule)
                .map_err(stage_err(Stage::Inversion, Some(i)))
        })?;

        let w = self.config.diffusion.guidance_scale;
        let opts = self.config.diffusion.null_opt;
        let results = exec::try_map_indexed(exec, n, |i| {
            optimize_null_embeddings(&trajectories[i], &denoiser, &cond, &null, w, &self.schedule, &opts)
                .map_err(stage_err(Stage::NullOptimization, Some(i)))
        })?;
        for (i, r) in results.iter().enumerate() {
            if !r.report.diverged.is_empty() {
                log::warn!("frame {i}: null-text optimization stalled at {} steps", r.report.diverged.len());
            }
        }
        let per_frame: Vec<Vec<Array2<f64>>> = results.iter().map(|r| r.embeddings.clone()).collect();
        let nulls = NullTrajectory::from_frames(&per_frame).map_err(stage_err(Stage::NullOptimization, None))?;
        Ok(InversionOutput { clean, trajectories, nulls, reports: results.into_iter().map(|r| r.report).collect() })
    }

    /// Flow-guided smoothing of `[N, h, w, c]` latents.
    pub fn smooth(&self, frames: &FrameSequence, latents: &Array4<f64>) -> Result<Array4<f64>, PipelineError> {
        let threshold = self.config.smoothing.flow_threshold;
        let (n, h, w, _) = latents.dim();
        if n < 2 || threshold == 0.0 {
            return Ok(latents.clone());
        }
        let flow = self.registry.flow_estimator.estimate(frames).map_err(stage_err(Stage::Smoothing, None))?;
        let masks = masks_from_flow(self.config.execution, &flow, threshold, (h, w)).map_err(stage_err(Stage::Smoothing, None))?;
        log::info!(
            "smoothing: {} of {} latent cells static",
            masks.data.iter().filter(|&&m| m == 1).count(),
            masks.data.len()
        );
        smooth_latents(latents, &masks).map_err(stage_err(Stage::Smoothing, None))
    }

    /// Grounding tokens `[N, M, d_model]` for every frame.
    pub fn grounding_tokens(&self, g: &VideoGrounding) -> Result<Array3<f64>, PipelineError> {
        let d = self.registry.denoiser.model_width();
        let m = g.entity_count();
        let mut out = Array3::zeros((g.frame_count(), m, d));
        for (i, ents) in g.frames().iter().enumerate() {
            let tokens = build_grounding_tokens(
                ents,
                self.registry.text_encoder.as_ref(),
                &self.registry.grounding_mlp,
                self.config.grounding.fourier_freqs,
            )
            .map_err(stage_err(Stage::Grounding, Some(i)))?;
            out.index_axis_mut(Axis(0), i).assign(&tokens);
        }
        Ok(out)
    }

    /// Condition maps on the latent grid, estimating depth when none is given.
    fn latent_conditions(
        &self,
        frames: &FrameSequence,
        conditions: Option<&ConditionMaps>,
        grid: (usize, usize),
    ) -> Result<Option<Array4<f64>>, PipelineError> {
        let ctl = &self.config.control;
        if !ctl.enabled() {
            return Ok(None);
        }
        let estimated;
        let maps = match (conditions, ctl.condition) {
            (Some(c), _) => c,
            (None, ConditionKind::Depth) => {
                let depth = exec::try_map_indexed(self.config.execution, frames.len(), |i| {
                    self.registry.depth_estimator.estimate(frames.frame(i)).map_err(stage_err(Stage::Control, Some(i)))
                })?;
                let views: Vec<_> = depth.iter().map(|d| d.view()).collect();
                let stacked = ndarray::stack(Axis(0), &views).map_err(stage_err(Stage::Control, None))?;
                estimated = ConditionMaps::from_depth(&DepthSequence::new(stacked).map_err(stage_err(Stage::Control, None))?);
                &estimated
            }
            (None, kind) => {
                return Err(PipelineError::new(Stage::Validation, None, format!("{kind:?} control needs condition maps")));
            }
        };
        if maps.len() != frames.len() {
            return Err(PipelineError::new(
                Stage::Validation,
                None,
                format!("{} condition maps for {} frames", maps.len(), frames.len()),
            ));
        }
        let want = self.registry.control_branch.condition_channels();
        if maps.channels() != want {
            return Err(PipelineError::new(
                Stage::Validation,
                None,
                format!("condition maps have {} channels, control branch expects {want}", maps.channels()),
            ));
        }
        maps.to_latent_grid(grid).map(Some).map_err(stage_err(Stage::Validation, None))
    }

    fn validate_inputs(&self, frames: &FrameSequence, g: &VideoGrounding) -> Result<(), PipelineError> {
        if g.frame_count() != frames.len() {
            return Err(PipelineError::new(
                Stage::Validation,
                None,
                format!("grounding has {} frames but the video has {}", g.frame_count(), frames.len()),
            ));
        }
        let report = validate_grounding(g, frames);
        if !report.is_valid() {
            return Err(PipelineError::new(Stage::Validation, None, report.to_string()));
        }
        Ok(())
    }

    /// The full edit, from source frames to decoded edited frames.
    pub fn edit(
        &self,
        frames: &FrameSequence,
        grounding: &VideoGrounding,
        spec: &EditSpec,
        conditions: Option<&ConditionMaps>,
    ) -> Result<EditOutput, PipelineError> {
        self.validate_inputs(frames, grounding)?;
        let grid = self.latent_grid(frames)?;
        let latent_conditions = self.latent_conditions(frames, conditions, grid)?;

        let inversion = self.invert(frames, spec.source_prompt())?;
        let z_t = self.smooth(frames, &inversion.noisiest())?;

        let outcome = apply_edit_spec(grounding, spec);
        let tokens = self.grounding_tokens(&outcome.grounding)?;
        let mask = derive_inpaint_mask(&outcome.grounding, grid);
        let inpaint = match (self.config.grounding.inpainting, &mask) {
            (Some(false), _) | (_, None) => None,
            (_, Some(m)) => Some(m),
        };
        if let Some(m) = inpaint {
            log::info!("inpainting: {} of {} latent cells preserved", m.preserved_cells(), grid.0 * grid.1);
        }

        let latents = self.denoise(z_t, spec.target_prompt(), &inversion, &tokens, latent_conditions.as_ref(), inpaint)?;
        let decoded = self.registry.codec.decode(&latents).map_err(stage_err(Stage::Decode, None))?;
        let frames_out = FrameSequence::new(decoded.into_data(), frames.fps()).map_err(stage_err(Stage::Decode, None))?;
        Ok(EditOutput { frames: frames_out, latents, inversion, mask, unmatched_phrases: outcome.unmatched })
    }

    /// Guided denoising from the smoothed `z_T`.
    fn denoise(
        &self,
        mut z: Array4<f64>,
        target_prompt: &str,
        inversion: &InversionOutput,
        tokens: &Array3<f64>,
        conditions: Option<&Array4<f64>>,
        inpaint: Option<&InpaintMask>,
    ) -> Result<Array4<f64>, PipelineError> {
        let n = z.dim().0;
        let exec = self.config.execution;
        let w = self.config.diffusion.guidance_scale;
        let target = self.registry.text_encoder.encode(target_prompt).map_err(stage_err(Stage::Denoising, None))?;
        let cond_ctx = target.broadcast((n, target.nrows(), target.ncols())).expect("broadcast over frames").to_owned();
        let grounding = (tokens.dim().1 > 0).then_some(tokens);
        let scale = self.config.control.scale;
        let denoiser = self.registry.denoiser.as_ref();
        let branch = self.registry.control_branch.as_ref();

        for k in (1..=self.schedule.num_inference_steps()).rev() {
            let (t, t_prev) = (self.schedule.timestep_at(k), self.schedule.timestep_at(k - 1));
            if let Some(m) = inpaint {
                blend_preserved(&mut z, &inversion.latents_at(k), m.data());
            }
            let null_ctx = inversion.nulls.at_step(k - 1);

            let residuals = |ctx: &Array3<f64>, mode: ContextMode| -> Result<Option<ControlResiduals>, PipelineError> {
                conditions
                    .map(|c| {
                        control_residuals(branch, &z, t, ctx, mode, c)
                            .map(|r| scale_residuals(&r, scale))
                            .map_err(stage_err(Stage::Control, None))
                    })
                    .transpose()
            };
            let predict = |ctx: &Array3<f64>, mode: ContextMode| -> Result<Array4<f64>, PipelineError> {
                let res = residuals(ctx, mode)?;
                let req = DenoiseRequest { latents: &z, t, contexts: ctx, mode, grounding, residuals: res.as_ref() };
                denoiser.predict(&req).map_err(stage_err(Stage::Denoising, None))
            };
            let eps = if w == 1.0 {
                predict(&cond_ctx, ContextMode::Cond)?
            } else {
                let (c, u) = exec::join(exec, || predict(&cond_ctx, ContextMode::Cond), || predict(&null_ctx, ContextMode::Uncond));
                cfg_predict(&c?, &u?, w).map_err(stage_err(Stage::Denoising, None))?
            };
            z = ddim_step(&z, &eps, t, t_prev, &self.schedule).map_err(stage_err(Stage::Denoising, None))?;
            if let Some((i, _)) = z.outer_iter().enumerate().find(|(_, f)| f.iter().any(|v| !v.is_finite())) {
                return Err(PipelineError::new(Stage::Denoising, Some(i), format!("non-finite latent at timestep {t}")));
            }
        }
        Ok(z)
    }
}

/// `z ← z·(1 − m) + anchor·m`, with `m` broadcast over frames and channels.
fn blend_preserved(z: &mut Array4<f64>, anchor: &Array4<f64>, mask: &Array2<u8>) {
    for (mut frame, anchor) in z.outer_iter_mut().zip(anchor.outer_iter()) {
        Zip::from(frame.lanes_mut(Axis(2))).and(anchor.lanes(Axis(2))).and(mask).for_each(|mut c, a, &m| {
            if m == 1 {
                c.assign(&a);
            }
        });
    }
}

/// One-call form of [`Pipeline::edit`] with providers resolved from `cfg`.
pub fn edit_video(
    frames: &FrameSequence,
    grounding: &VideoGrounding,
    spec: &EditSpec,
    conditions: Option<&ConditionMaps>,
    cfg: &PipelineConfig,
) -> Result<FrameSequence, PipelineError> {
    Ok(Pipeline::new(cfg.clone())?.edit(frames, grounding, spec, conditions)?.frames)
}
