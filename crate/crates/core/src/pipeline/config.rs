use serde::{Deserialize, Serialize};

use super::{PipelineError, Stage};
use crate::attention::GateParams;
use crate::control::ControlConfig;
use crate::diffusion::{make_schedule, NoiseSchedule, NullOptOptions};
use crate::exec::Execution;
use crate::providers::{ProviderRegistry, ProvidersConfig, RegistryOptions};
use crate::video_model::EditSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub num_inference_steps: usize,
    pub guidance_scale: f64,
    pub null_opt: NullOptOptions,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            num_inference_steps: 50,
            guidance_scale: 12.5,
            null_opt: NullOptOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingConfig {
    pub flow_threshold: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { flow_threshold: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundingConfig {
    pub fourier_freqs: usize,
    pub gate: GateParams,
    /// `None` enables inpainting whenever a mask can be derived.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inpainting: Option<bool>,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self { fourier_freqs: 8, gate: GateParams::default(), inpainting: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub global: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { global: 42 }
    }
}

/// Everything a run needs besides its input files.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub diffusion: DiffusionConfig,
    pub smoothing: SmoothingConfig,
    pub control: ControlConfig,
    pub grounding: GroundingConfig,
    pub providers: ProvidersConfig,
    pub seeds: SeedConfig,
    pub execution: Execution,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edit: Option<EditSpec>,
}

fn invalid(msg: String) -> PipelineError {
    PipelineError::new(Stage::Validation, None, msg)
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let d = &self.diffusion;
        if !d.guidance_scale.is_finite() || d.guidance_scale < 0.0 {
            return Err(invalid(format!("guidance_scale must be finite and >= 0, got {}", d.guidance_scale)));
        }
        let n = &d.null_opt;
        if !(n.learning_rate.is_finite() && n.learning_rate > 0.0) || !(n.early_stop_loss.is_finite() && n.early_stop_loss >= 0.0) {
            return Err(invalid("null_opt learning_rate must be > 0 and early_stop_loss >= 0".into()));
        }
        self.schedule()?;
        let t = self.smoothing.flow_threshold;
        if !t.is_finite() || t < 0.0 {
            return Err(invalid(format!("flow_threshold must be finite and >= 0, got {t}")));
        }
        self.control.validate().map_err(|e| invalid(e.to_string()))?;
        if self.grounding.fourier_freqs == 0 || self.grounding.fourier_freqs > 30 {
            return Err(invalid(format!("fourier_freqs must be in 1..=30, got {}", self.grounding.fourier_freqs)));
        }
        let g = self.grounding.gate;
        if !g.gamma.is_finite() || !g.scale.is_finite() {
            return Err(invalid("gate parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, PipelineError> {
        let d = &self.diffusion;
        make_schedule(d.train_steps, d.beta_start, d.beta_end, d.num_inference_steps).map_err(|e| invalid(e.to_string()))
    }

    pub fn registry_options(&self) -> RegistryOptions {
        RegistryOptions {
            seed: self.seeds.global,
            gate: self.grounding.gate,
            fourier_freqs: self.grounding.fourier_freqs,
            condition_channels: self.control.condition.channels().max(1),
            execution: self.execution,
        }
    }

    pub fn registry(&self) -> Result<ProviderRegistry, PipelineError> {
        ProviderRegistry::resolve(&self.providers, self.registry_options())
            .map_err(|e| PipelineError::new(Stage::Providers, None, e.to_string()))
    }
}
