//! Run configuration: one JSON document holding every experiment knob.
//!
//! Every section rejects unknown keys and fills omitted ones with defaults,
//! so `{}` is a complete, valid configuration. [`RunConfig::validate`] runs
//! before any compute.

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterKind;
use crate::error::{Error, Result};
use crate::layout::{DEFAULT_LAMBDA, DEFAULT_PHI0, DEFAULT_TAU};
use crate::objectives::LossWeights;
use crate::sama::{DEFAULT_WINDOW_END, DEFAULT_WINDOW_START};

/// Weight-update parameterization and its size knob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Which adapter family to attach to every attention linear.
    pub kind: AdapterKind,
    /// Kronecker factor size `f` for the KronA family, rank `r` for LoRA.
    pub factor: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig { kind: AdapterKind::KronaWed, factor: 16 }
    }
}

/// Optimization knobs for single-concept training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of optimizer steps.
    pub steps: usize,
    /// Adam learning rate.
    pub learning_rate: f64,
    /// Permit substituting a luminance-threshold mask when an item has none.
    pub allow_mask_fallback: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 50, learning_rate: 0.02, allow_mask_fallback: false }
    }
}

/// Sampling loop knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Number of deterministic denoising steps.
    pub steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 10 }
    }
}

/// Cross-branch value-injection knobs for multi-concept generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamaConfig {
    /// Master switch; disabled matches plain fused-model sampling.
    pub enabled: bool,
    /// Fraction of the step count at which injection starts.
    pub window_start: f64,
    /// Fraction of the step count at which injection ends.
    pub window_end: f64,
    /// Feature field matched across branches: `dec-input`, `dec-q`, or `dec-k`.
    pub descriptor: String,
}

impl Default for SamaConfig {
    fn default() -> Self {
        SamaConfig {
            enabled: true,
            window_start: DEFAULT_WINDOW_START,
            window_end: DEFAULT_WINDOW_END,
            descriptor: "dec-input".to_string(),
        }
    }
}

/// Descriptor fields [`SamaConfig::descriptor`] may name.
pub const DESCRIPTOR_FIELDS: [&str; 3] = ["dec-input", "dec-q", "dec-k"];

/// Layout-consistency guidance knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Master switch; disabled skips the latent update entirely.
    pub enabled: bool,
    /// Refinement shift added below/above the activation threshold.
    pub lambda: f64,
    /// Activation threshold separating suppressed from boosted entries.
    pub tau: f64,
    /// Initial guidance strength; decays linearly to zero over the run.
    pub phi0: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            enabled: true,
            lambda: DEFAULT_LAMBDA,
            tau: DEFAULT_TAU,
            phi0: DEFAULT_PHI0,
        }
    }
}

/// Ridge term for least-squares fusion.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Explicit ridge weight; `null` scales one from the Gram trace.
    pub mu: Option<f64>,
}

/// Seeds for every random stream a run touches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    /// Frozen base model and text encoder.
    pub model: u64,
    /// Synthetic dataset generation.
    pub data: u64,
    /// Training noise, timestep draws, and adapter init.
    pub train: u64,
    /// Sampling initial latents.
    pub sample: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig { model: 7, data: 11, train: 13, sample: 17 }
    }
}

/// Filesystem locations; relative paths resolve against the working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    /// Directory run outputs are written under.
    pub out_dir: String,
    /// Directory the dataset is read from (or written to by `make-dataset`).
    pub dataset_dir: String,
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig { out_dir: "runs".to_string(), dataset_dir: "data".to_string() }
    }
}

/// Complete experiment configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub adapter: AdapterConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub sama: SamaConfig,
    pub guidance: GuidanceConfig,
    pub fusion: FusionConfig,
    pub seeds: SeedConfig,
    pub paths: PathConfig,
}

impl RunConfig {
    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Serializes to pretty JSON (the on-disk configuration format).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every knob; returns the first violation.
    pub fn validate(&self) -> Result<()> {
        if self.adapter.factor == 0 {
            return Err(Error::config("adapter.factor must be at least 1"));
        }
        self.loss.validate()?;
        if self.train.steps == 0 {
            return Err(Error::config("train.steps must be at least 1"));
        }
        if !(self.train.learning_rate.is_finite() && self.train.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "train.learning_rate must be positive and finite, got {}",
                self.train.learning_rate
            )));
        }
        if self.sampler.steps == 0 {
            return Err(Error::config("sampler.steps must be at least 1"));
        }
        let (ws, we) = (self.sama.window_start, self.sama.window_end);
        if !(ws.is_finite() && we.is_finite() && 0.0 <= ws && ws < we && we <= 1.0) {
            return Err(Error::config(format!(
                "sama window must satisfy 0 <= start < end <= 1, got [{ws}, {we}]"
            )));
        }
        if !DESCRIPTOR_FIELDS.contains(&self.sama.descriptor.as_str()) {
            return Err(Error::config(format!(
                "sama.descriptor '{}' is not one of {:?}",
                self.sama.descriptor, DESCRIPTOR_FIELDS
            )));
        }
        for (name, v) in [
            ("guidance.lambda", self.guidance.lambda),
            ("guidance.tau", self.guidance.tau),
            ("guidance.phi0", self.guidance.phi0),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!(
                    "{name} must be nonnegative and finite, got {v}"
                )));
            }
        }
        if self.guidance.tau > 1.0 {
            return Err(Error::config(format!(
                "guidance.tau must lie in [0, 1], got {}",
                self.guidance.tau
            )));
        }
        if let Some(mu) = self.fusion.mu {
            if !(mu.is_finite() && mu >= 0.0) {
                return Err(Error::config(format!(
                    "fusion.mu must be nonnegative and finite, got {mu}"
                )));
            }
        }
        if self.paths.out_dir.is_empty() || self.paths.dataset_dir.is_empty() {
            return Err(Error::config("paths must not be empty"));
        }
        Ok(())
    }
}
