//! Per-command run configuration, parsed from JSON. Every field has a
//! default, so `{}` (or no `--config` at all) is a valid document; unknown
//! keys are rejected with the offending path. Each command echoes its fully
//! resolved config as one JSON line, and that echo is itself a valid config
//! file reproducing the run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use rddm_core::drift::{DriftConfig, NormScaling};
use rddm_core::generator::GeneratorConfig;
use rddm_core::sim::NoiseModel;
use rddm_core::trainer::TrainConfig;

use crate::CliError;

/// Kernel-distance scaling spelled for config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingName {
    PerDimension,
    Raw,
}

impl From<ScalingName> for NormScaling {
    fn from(s: ScalingName) -> NormScaling {
        match s {
            ScalingName::PerDimension => NormScaling::PerDimension,
            ScalingName::Raw => NormScaling::Raw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub size: usize,
    pub train_count: usize,
    pub test_count: usize,
    /// Uniform images for noise-spectrum estimation; 0 skips the split.
    pub flat_count: usize,
    pub flat_value: f64,
    pub gaussian_sigma: f64,
    pub streak_sigma: f64,
    pub ndct_sigma: f64,
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let noise = NoiseModel::default();
        SimulateConfig {
            size: 64,
            train_count: 64,
            test_count: 16,
            flat_count: 16,
            flat_value: 0.4,
            gaussian_sigma: noise.gaussian_sigma,
            streak_sigma: noise.streak_sigma,
            ndct_sigma: noise.ndct_sigma,
            seed: 0,
        }
    }
}

impl SimulateConfig {
    pub fn noise_model(&self) -> NoiseModel {
        NoiseModel {
            gaussian_sigma: self.gaussian_sigma,
            streak_sigma: self.streak_sigma,
            ndct_sigma: self.ndct_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCliConfig {
    pub iterations: u64,
    pub lr: f64,
    pub decay_step: u64,
    pub decay_factor: f64,
    pub ema_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub patch: usize,
    pub weight_decay: f64,
    pub temperatures: Vec<f64>,
    pub lambda: f64,
    pub norm_scaling: ScalingName,
    pub base_channels: usize,
    pub depth: usize,
    pub seed: u64,
    /// Progress lines are printed every `log_every` iterations.
    pub log_every: u64,
}

impl Default for TrainCliConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainCliConfig {
            iterations: t.iterations,
            lr: t.lr,
            decay_step: t.decay_step,
            decay_factor: t.decay_factor,
            ema_decay: t.ema_decay,
            clip_norm: t.clip_norm,
            batch_size: t.batch_size,
            patch: t.patch,
            weight_decay: t.weight_decay,
            temperatures: t.drift.temperatures,
            lambda: t.drift.lambda,
            norm_scaling: ScalingName::PerDimension,
            base_channels: t.generator.base_channels,
            depth: t.generator.depth,
            seed: t.seed,
            log_every: 100,
        }
    }
}

impl TrainCliConfig {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            lr: self.lr,
            decay_step: self.decay_step,
            decay_factor: self.decay_factor,
            ema_decay: self.ema_decay,
            clip_norm: self.clip_norm,
            batch_size: self.batch_size,
            patch: self.patch,
            weight_decay: self.weight_decay,
            drift: DriftConfig {
                temperatures: self.temperatures.clone(),
                lambda: self.lambda,
                norm_scaling: self.norm_scaling.into(),
            },
            generator: GeneratorConfig {
                base_channels: self.base_channels,
                depth: self.depth,
                seed: self.seed,
                ..GeneratorConfig::default()
            },
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiseConfig {
    /// Base-noise seed for the single generator pass per image.
    pub seed: u64,
    /// Evaluate with raw parameters instead of the EMA shadow.
    pub raw_weights: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Tensor name to read from the prediction archive.
    pub pred_tensor: String,
    /// Tensor name to read from the reference archive.
    pub ref_tensor: String,
    pub roi_size: usize,
    pub data_range: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pred_tensor: "x".to_string(),
            ref_tensor: "x".to_string(),
            roi_size: 64,
            data_range: 1.0,
        }
    }
}

/// Parses a JSON config, reporting unknown or ill-typed keys with their path.
pub fn load<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        CliError::Usage(format!(
            "invalid config {}: {} (at {})",
            path.display(),
            e.inner(),
            e.path()
        ))
    })
}

/// One-line resolved-config echo; the payload is a valid config document.
pub fn echo<T: Serialize>(cfg: &T) {
    println!(
        "config: {}",
        serde_json::to_string(cfg).expect("config structs serialize infallibly")
    );
}
