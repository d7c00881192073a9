use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::features::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Ibunet,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Batch,
    Instance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipFusion {
    Concat,
    Add,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpsampleKind {
    Bilinear,
    TransposedConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Prelu,
    Relu,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Ibunet => "ibunet",
            Arch::Baseline => "baseline",
        })
    }
}

impl FromStr for Arch {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ibunet" => Ok(Arch::Ibunet),
            "baseline" | "routenet" => Ok(Arch::Baseline),
            other => Err(ModelError::ConfigInvalid(format!("unknown model `{other}` (ibunet|baseline)"))),
        }
    }
}

/// Architecture hyperparameters. Serialized as TOML; `model` selects the
/// architecture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(rename = "model")]
    pub arch: Arch,
    pub task: Task,
    pub in_channels: usize,
    pub base_width: usize,
    pub num_scales: usize,
    pub norm: NormKind,
    pub skip_fusion: SkipFusion,
    pub upsample: UpsampleKind,
    pub activation: Activation,
}

pub fn default_norm(task: Task) -> NormKind {
    match task {
        Task::Rc => NormKind::Batch,
        Task::Drc => NormKind::Instance,
    }
}

impl ModelConfig {
    pub fn ibunet(task: Task) -> Self {
        ModelConfig {
            arch: Arch::Ibunet,
            task,
            in_channels: task.channels(),
            base_width: 16,
            num_scales: 4,
            norm: default_norm(task),
            skip_fusion: SkipFusion::Concat,
            upsample: UpsampleKind::Bilinear,
            activation: Activation::Prelu,
        }
    }

    pub fn baseline(task: Task) -> Self {
        ModelConfig {
            arch: Arch::Baseline,
            task,
            in_channels: task.channels(),
            base_width: 32,
            num_scales: 3,
            norm: default_norm(task),
            skip_fusion: SkipFusion::Concat,
            upsample: UpsampleKind::TransposedConv,
            activation: Activation::Relu,
        }
    }

    pub fn default_for(arch: Arch, task: Task) -> Self {
        match arch {
            Arch::Ibunet => Self::ibunet(task),
            Arch::Baseline => Self::baseline(task),
        }
    }

    pub fn with_base_width(mut self, base_width: usize) -> Self {
        self.base_width = base_width;
        self
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.num_scales
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::ConfigInvalid(m));
        if self.in_channels != self.task.channels() {
            return bad(format!("task {} needs {} input channels, got {}", self.task, self.task.channels(), self.in_channels));
        }
        if self.base_width == 0 {
            return bad("base_width must be at least 1".into());
        }
        let want = match self.arch {
            Arch::Ibunet => 4,
            Arch::Baseline => 3,
        };
        if self.num_scales != want {
            return bad(format!("{} uses {want} scales, got {}", self.arch, self.num_scales));
        }
        if self.arch == Arch::Baseline && self.skip_fusion == SkipFusion::Add && self.upsample == UpsampleKind::Bilinear {
            return bad("baseline widens its bottleneck, so add fusion needs transposed-conv upsampling".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| ModelError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        for cfg in [ModelConfig::ibunet(Task::Rc), ModelConfig::baseline(Task::Drc)] {
            let text = cfg.to_toml();
            assert_eq!(ModelConfig::from_toml(&text).unwrap(), cfg);
        }
        let text = ModelConfig::baseline(Task::Rc).to_toml();
        assert!(text.contains("upsample = \"transposed-conv\""), "{text}");
        assert!(text.contains("model = \"baseline\""));
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::ibunet(Task::Drc);
        c.validate().unwrap();
        c.in_channels = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::ibunet(Task::Rc);
        c.num_scales = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::baseline(Task::Rc);
        c.skip_fusion = SkipFusion::Add;
        c.validate().unwrap();
        c.upsample = UpsampleKind::Bilinear;
        assert!(c.validate().is_err());
    }
}
