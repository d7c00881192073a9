use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use ibunet_core::model::{Activation, Arch, ModelConfig, NormKind, SkipFusion, UpsampleKind};
use ibunet_core::{Task, TrainConfig};

/// Partial model settings from a config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub model: Option<Arch>,
    pub task: Option<Task>,
    pub in_channels: Option<usize>,
    pub base_width: Option<usize>,
    pub num_scales: Option<usize>,
    pub norm: Option<NormKind>,
    pub skip_fusion: Option<SkipFusion>,
    pub upsample: Option<UpsampleKind>,
    pub activation: Option<Activation>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: Option<toml::Table>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Defaults for the architecture, then file values, then `flags`.
    pub fn model_config(&self, arch: Option<Arch>, task: Option<Task>, flags: &ModelSection) -> ModelConfig {
        let f = &self.model;
        let arch = arch.or(f.model).unwrap_or(Arch::Ibunet);
        let task = task.or(f.task).unwrap_or(Task::Rc);
        let mut c = ModelConfig::default_for(arch, task);
        for s in [f, flags] {
            c.in_channels = s.in_channels.unwrap_or(c.in_channels);
            c.base_width = s.base_width.unwrap_or(c.base_width);
            c.num_scales = s.num_scales.unwrap_or(c.num_scales);
            c.norm = s.norm.unwrap_or(c.norm);
            c.skip_fusion = s.skip_fusion.unwrap_or(c.skip_fusion);
            c.upsample = s.upsample.unwrap_or(c.upsample);
            c.activation = s.activation.unwrap_or(c.activation);
        }
        c
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        match &self.train {
            None => Ok(TrainConfig::default()),
            Some(t) => t.clone().try_into().context("parsing [train] section"),
        }
    }
}

#[derive(Serialize)]
struct Resolved<'a> {
    model: &'a ModelConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<&'a TrainConfig>,
}

/// TOML rendering of the effective configuration, re-loadable via `--config`.
pub fn resolved_toml(model: &ModelConfig, train: Option<&TrainConfig>) -> String {
    toml::to_string(&Resolved { model, train }).expect("config serializes")
}
