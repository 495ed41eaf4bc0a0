//! Experiment configs: an optional JSON file overlaid with command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use e3va::backbone::BackboneConfig;
use e3va::peft::{MethodConfig, MethodName};
use e3va::report::Format;
use e3va::train::{HeadConfig, TrainConfig};

/// Presets too large to materialise; usable for parameter counting only.
pub const COUNT_ONLY_PRESETS: [&str; 2] = ["swin-b", "swin-l"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Custom(BackboneConfig),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Preset("toy-1".into())
    }
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<BackboneConfig> {
        let cfg = match self {
            ModelSpec::Preset(name) => BackboneConfig::preset(name)?,
            ModelSpec::Custom(cfg) => cfg.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn label(&self) -> &str {
        match self {
            ModelSpec::Preset(name) => name,
            ModelSpec::Custom(_) => "custom",
        }
    }

    /// Errors for presets that cannot be built at desk scale.
    pub fn require_materializable(&self, command: &str) -> Result<()> {
        if let ModelSpec::Preset(name) = self {
            if COUNT_ONLY_PRESETS.contains(&name.as_str()) {
                bail!(
                    "`{command}` needs a toy-scale model; preset {name} is far above the desk-scale \
                     limit and is available for count-params only"
                );
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub format: Format,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("reports")
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            out_dir: default_out_dir(),
            format: Format::default(),
        }
    }
}

fn default_method() -> MethodConfig {
    MethodConfig::e3va(8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default = "default_method")]
    pub method: MethodConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub report: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            method: default_method(),
            head: HeadConfig::default(),
            train: TrainConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Flags shared by every subcommand. Each one set overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model preset: toy-1, micro, swin-b or swin-l.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub alpha: Option<usize>,
    #[arg(long)]
    pub adapter_dim: Option<usize>,
    /// Give the highway trainable copies of the merge layers.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub trainable_reduction: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub train_fpn_norm: Option<bool>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, env = "E3VA_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub n_images: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<Format>,
    /// Overwrite existing report files.
    #[arg(long)]
    pub force: bool,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = &self.model {
            c.model = ModelSpec::Preset(m.clone());
        }
        if let Some(name) = &self.method {
            c.method.name = name.parse::<MethodName>()?;
        }
        set(&mut c.method.alpha, self.alpha);
        set(&mut c.method.adapter_dim, self.adapter_dim);
        set(&mut c.method.trainable_reduction, self.trainable_reduction);
        if self.train_fpn_norm.is_some() {
            c.method.train_fpn_norm = self.train_fpn_norm;
        }
        set(&mut c.head.classes, self.classes);
        set(&mut c.train.lr, self.lr);
        set(&mut c.train.steps, self.steps);
        set(&mut c.train.batch, self.batch);
        set(&mut c.train.seed, self.seed);
        set(&mut c.train.weight_decay, self.weight_decay);
        set(&mut c.train.n_images, self.n_images);
        set(&mut c.report.out_dir, self.out_dir.clone());
        set(&mut c.report.format, self.format);
        c.model.resolve()?;
        c.method.validate()?;
        c.head.validate()?;
        c.train.validate()?;
        Ok(c)
    }
}

fn set<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

/// Parses `a,b,c` into method configs sharing `base`'s hyperparameters.
pub fn method_list(list: &str, base: &MethodConfig) -> Result<Vec<MethodConfig>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let name: MethodName = s.parse()?;
            let m = MethodConfig {
                name,
                trainable_reduction: base.trainable_reduction && name == MethodName::E3va,
                ..base.clone()
            };
            m.validate()?;
            Ok(m)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(
            &p,
            r#"{"model": "micro", "method": {"name": "lora", "adapter_dim": 4}, "train": {"steps": 3}}"#,
        )
        .unwrap();
        let args = CommonArgs {
            config: Some(p),
            steps: Some(9),
            ..Default::default()
        };
        let c = args.resolve().unwrap();
        assert_eq!(c.model, ModelSpec::Preset("micro".into()));
        assert_eq!(c.method.name, MethodName::Lora);
        assert_eq!(c.method.adapter_dim, 4);
        assert_eq!(c.train.steps, 9);
        assert_eq!(c.train.batch, TrainConfig::default().batch);
    }

    #[test]
    fn custom_model_fields() {
        let c: ExperimentConfig = serde_json::from_str(
            r#"{"model": {"embed_dim": 8, "depths": [1], "heads": [1], "window": 2, "patch": 4, "img": 16}}"#,
        )
        .unwrap();
        assert_eq!(c.model.label(), "custom");
        assert_eq!(c.model.resolve().unwrap().mlp_ratio, 4);
    }

    #[test]
    fn method_list_parses_and_rejects() {
        let base = MethodConfig::e3va(4);
        let ms = method_list("full, fixed,e3va", &base).unwrap();
        assert_eq!(ms.len(), 3);
        assert_eq!(ms[2].alpha, 4);
        assert!(method_list("full,bogus", &base).is_err());
    }
}
