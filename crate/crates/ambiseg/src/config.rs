//! Resolved experiment configuration.
//!
//! Precedence: built-in defaults, then a TOML config file, then `--set`
//! overrides with flat dotted keys (`train.lr=5e-5`). The fully resolved
//! config is echoed into every artifact so any of them can reproduce the
//! run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::diffusion::{PredictionKind, SamplerConfig, SamplerKind};
use crate::error::{Error, Result};
use crate::model::DenoiserConfig;
use crate::schedule::{LossWeighting, NoiseSchedule, WeightingKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub sampler: SamplerSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    /// Input scale b; the paper's final models use 0.1.
    pub input_scale: f64,
    pub t_min: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            input_scale: 0.1,
            t_min: crate::diffusion::T_MIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub channels: Vec<usize>,
    pub num_res_blocks: Vec<usize>,
    pub middle_blocks: usize,
    pub prediction_kind: PredictionKind,
    pub time_embed_dim: usize,
    pub use_attention: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            channels: vec![16, 32, 64],
            num_res_blocks: vec![1, 2, 2],
            middle_blocks: 2,
            prediction_kind: PredictionKind::X0,
            time_embed_dim: 64,
            use_attention: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub weighting: WeightingKind,
    pub sigmoid_bias: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            weighting: WeightingKind::TruncSnr,
            sigmoid_bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    pub steps: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            kind: SamplerKind::Ddim,
            steps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Fraction of total steps spent in cosine learning-rate decay.
    pub decay_frac: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 5000,
            batch_size: 8,
            lr: 1e-4,
            clip_norm: 1.0,
            decay_frac: 0.2,
            weight_decay: 0.01,
            seed: 0,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    None,
    Central,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub image_size: usize,
    pub lesion_radius_min: f64,
    pub lesion_radius_max: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub empty_prob_at_min_contrast: f64,
    pub empty_prob_at_max_contrast: f64,
    pub noise_std: f64,
    pub boundary_jitter: [f64; crate::data::ANNOTATORS],
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub crop: CropMode,
    pub crop_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            image_size: 32,
            lesion_radius_min: 4.0,
            lesion_radius_max: 8.0,
            contrast_min: 0.2,
            contrast_max: 1.0,
            empty_prob_at_min_contrast: 0.8,
            empty_prob_at_max_contrast: 0.05,
            noise_std: 0.1,
            boundary_jitter: [-2.0, -1.0, 1.0, 2.0],
            n_train: 500,
            n_test: 100,
            seed: 0,
            crop: CropMode::None,
            crop_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_preds: Vec<usize>,
    pub pp_ratio: f64,
    pub seed: u64,
    /// Worker threads for evaluation; 0 uses all cores. Must not change
    /// results.
    pub workers: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_preds: vec![4, 16],
            pp_ratio: 0.5,
            seed: 0,
            workers: 0,
        }
    }
}

impl ExperimentConfig {
    /// Resolve from defaults, an optional config file and dotted-key
    /// overrides, in that order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = ExperimentConfig::default().to_table()?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            let file_table: toml::Table = toml::from_str(&text).map_err(|e| {
                Error::Config(format!("config file {}: {e}", path.display()))
            })?;
            merge_tables(&mut table, file_table);
        }
        for entry in overrides {
            apply_override(&mut table, entry)?;
        }
        let resolved: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        Ok(resolved)
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        let value =
            toml::Value::try_from(self).map_err(|e| Error::Config(format!("serialize: {e}")))?;
        match value {
            toml::Value::Table(t) => Ok(t),
            _ => unreachable!("struct serializes to a table"),
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serialize: {e}")))
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.schedule.input_scale)
    }

    pub fn loss_weighting(&self) -> LossWeighting {
        LossWeighting {
            kind: self.loss.weighting,
            sigmoid_bias: self.loss.sigmoid_bias,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            channels: self.model.channels.clone(),
            num_res_blocks: self.model.num_res_blocks.clone(),
            middle_blocks: self.model.middle_blocks,
            prediction_kind: self.model.prediction_kind,
            time_embed_dim: self.model.time_embed_dim,
            use_attention: self.model.use_attention,
        }
    }

    pub fn sampler_config(&self, seed: u64) -> Result<SamplerConfig> {
        let mut cfg = SamplerConfig::new(self.sampler.kind, self.sampler.steps, seed)?;
        cfg.t_min = self.schedule.t_min;
        Ok(cfg)
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            image_size: self.data.image_size,
            lesion_radius_range: (self.data.lesion_radius_min, self.data.lesion_radius_max),
            contrast_range: (self.data.contrast_min, self.data.contrast_max),
            empty_prob_range: (
                self.data.empty_prob_at_min_contrast,
                self.data.empty_prob_at_max_contrast,
            ),
            noise_std: self.data.noise_std,
            boundary_jitter: self.data.boundary_jitter,
            seed: self.data.seed,
        }
    }
}

fn merge_tables(base: &mut toml::Table, other: toml::Table) {
    for (key, value) in other {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Apply one `section.key=value` override; the value is parsed as TOML and
/// falls back to a plain string.
fn apply_override(table: &mut toml::Table, entry: &str) -> Result<()> {
    let (path, raw) = entry.split_once('=').ok_or_else(|| {
        Error::Usage(format!("override '{entry}' must look like section.key=value"))
    })?;
    let parts: Vec<&str> = path.trim().split('.').collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("bad override key '{path}'")));
    }
    let value = parse_override_value(raw.trim());

    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        current = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("'{part}' in '{path}' is not a section")))?;
    }
    current.insert(parts.last().unwrap().to_string(), value);
    Ok(())
}

fn parse_override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    if let Ok(t) = wrapped.parse::<toml::Table>() {
        if let Some(v) = t.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}
