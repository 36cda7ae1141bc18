//! Run configuration: a TOML file with `[model]`, `[train]`, `[data]` and
//! `[output]` tables. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use seesaw::train::{CifarKind, Schedule, TrainConfig};
use seesaw::{BlockKind, Depth, InputLayout, ModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    pub data: DataSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: String,
    #[serde(default = "default_depth")]
    pub depth: String,
    #[serde(default = "default_layout")]
    pub layout: String,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "one")]
    pub width: f64,
    pub expansion: Option<usize>,
    pub share_width: Option<usize>,
    pub head_channels: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: String,
    pub base_lr: f64,
    pub total_epochs: usize,
    pub seed: u64,
    pub augment: bool,
    pub shuffle: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dir: PathBuf,
    #[serde(default = "default_kind")]
    pub kind: String,
    /// Use only the first `train_subset` training images.
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

fn default_depth() -> String {
    "0.5D".into()
}

fn default_layout() -> String {
    "cifar_32".into()
}

fn default_classes() -> usize {
    10
}

fn one() -> f64 {
    1.0
}

fn default_kind() -> String {
    "cifar10".into()
}

impl Default for TrainSection {
    fn default() -> Self {
        let c = TrainConfig::cifar();
        TrainSection {
            batch_size: c.batch_size,
            momentum: c.momentum,
            weight_decay: c.weight_decay,
            schedule: c.schedule.name().into(),
            base_lr: c.base_lr,
            total_epochs: c.total_epochs,
            seed: c.seed,
            augment: c.augment,
            shuffle: c.shuffle,
        }
    }
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "runs/latest".into() }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let m = &self.model;
        let arch: BlockKind = m.arch.parse()?;
        let depth: Depth = m.depth.parse()?;
        let layout: InputLayout = m.layout.parse()?;
        let mut spec = ModelSpec::new(arch, depth, layout, m.classes).with_width(m.width);
        if let Some(t) = m.expansion {
            spec = spec.set_expansion(t)?;
        }
        spec.share_width = m.share_width;
        if let Some(h) = m.head_channels {
            spec.head_channels = h;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let schedule: Schedule = t.schedule.parse()?;
        let cfg = TrainConfig {
            batch_size: t.batch_size,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            schedule,
            base_lr: t.base_lr,
            total_epochs: t.total_epochs,
            seed: t.seed,
            augment: t.augment,
            shuffle: t.shuffle,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn cifar_kind(&self) -> Result<CifarKind> {
        match self.data.kind.as_str() {
            "cifar10" => Ok(CifarKind::Cifar10),
            "cifar100" => Ok(CifarKind::Cifar100),
            other => bail!("data.kind: unknown dataset `{other}` (expected cifar10 or cifar100)"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
arch = "seesaw-shuffle"

[data]
dir = "data"
"#;

    #[test]
    fn defaults_fill_missing_sections() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.train, TrainSection::default());
        assert_eq!(c.train_config().unwrap(), TrainConfig::cifar());
        assert_eq!(c.model_spec().unwrap().depth, Depth::Half);
    }

    #[test]
    fn unknown_keys_are_named() {
        let text = format!("{MINIMAL}\n[output]\ndir = \"x\"\nfolder = \"y\"\n");
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("folder"), "{err}");
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
