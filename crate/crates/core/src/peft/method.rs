use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodName {
    Full,
    Fixed,
    Bitfit,
    Norm,
    Partial1,
    Adapter,
    Lora,
    Adaptformer,
    E3va,
}

impl MethodName {
    pub const ALL: [MethodName; 9] = [
        MethodName::Full,
        MethodName::Fixed,
        MethodName::Bitfit,
        MethodName::Norm,
        MethodName::Partial1,
        MethodName::Adapter,
        MethodName::Lora,
        MethodName::Adaptformer,
        MethodName::E3va,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::Full => "full",
            MethodName::Fixed => "fixed",
            MethodName::Bitfit => "bitfit",
            MethodName::Norm => "norm",
            MethodName::Partial1 => "partial1",
            MethodName::Adapter => "adapter",
            MethodName::Lora => "lora",
            MethodName::Adaptformer => "adaptformer",
            MethodName::E3va => "e3va",
        }
    }

    /// Methods that add parameters inside the blocks.
    pub fn inserts(self) -> bool {
        matches!(
            self,
            MethodName::Adapter | MethodName::Lora | MethodName::Adaptformer | MethodName::E3va
        )
    }

    /// Methods whose inserted parameters sit on the backbone stream.
    pub fn mutates_stream(self) -> bool {
        matches!(self, MethodName::Adapter | MethodName::Lora | MethodName::Adaptformer)
    }
}

impl fmt::Display for MethodName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodName::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

/// How highway and backbone features are combined before the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// `FpnNorm(l + e)`
    #[default]
    Additive,
    /// `FpnNorm(e)`
    HighwayOnly,
}

/// Which parts of the FPN norms a method trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpnNormTraining {
    None,
    BiasOnly,
    All,
}

fn default_alpha() -> usize {
    8
}

pub const DEFAULT_ADAPTER_DIM: usize = 64;
/// Stage-0 width that [`DEFAULT_ADAPTER_DIM`] is paired with.
pub const REFERENCE_EMBED_DIM: usize = 128;

fn default_adapter_dim() -> usize {
    DEFAULT_ADAPTER_DIM
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub name: MethodName,
    /// Rank of every dual low-rank branch.
    #[serde(default = "default_alpha")]
    pub alpha: usize,
    /// Middle dimension of dense adapters and rank of LoRA.
    #[serde(default = "default_adapter_dim")]
    pub adapter_dim: usize,
    /// `None` selects the method's default (see [`MethodConfig::fpn_norm_training`]).
    #[serde(default)]
    pub train_fpn_norm: Option<bool>,
    /// Give the highway its own trainable merge layers instead of sharing the
    /// frozen backbone ones.
    #[serde(default)]
    pub trainable_reduction: bool,
    #[serde(default)]
    pub fusion: Fusion,
}

impl MethodConfig {
    pub fn new(name: MethodName) -> Self {
        Self {
            name,
            alpha: default_alpha(),
            adapter_dim: default_adapter_dim(),
            train_fpn_norm: None,
            trainable_reduction: false,
            fusion: Fusion::Additive,
        }
    }

    pub fn e3va(alpha: usize) -> Self {
        Self {
            alpha,
            ..Self::new(MethodName::E3va)
        }
    }

    /// Rescales `adapter_dim` by `embed_dim / REFERENCE_EMBED_DIM`, so the
    /// dense adapters stay bottlenecks on narrow backbones.
    pub fn with_proportional_adapter_dim(mut self, embed_dim: usize) -> Self {
        self.adapter_dim = (DEFAULT_ADAPTER_DIM * embed_dim / REFERENCE_EMBED_DIM).max(1);
        self
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(Self::new(name.parse()?))
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha == 0 {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if self.adapter_dim == 0 {
            return Err(Error::Config("adapter_dim must be positive".into()));
        }
        if self.trainable_reduction && self.name != MethodName::E3va {
            return Err(Error::Config(format!(
                "trainable_reduction only applies to e3va, not {}",
                self.name
            )));
        }
        Ok(())
    }

    /// FPN norms train fully under full, norm and e3va, bias-only under
    /// bitfit, and not at all otherwise, unless `train_fpn_norm` says so.
    pub fn fpn_norm_training(&self) -> FpnNormTraining {
        match (self.train_fpn_norm, self.name) {
            (Some(true), _) => FpnNormTraining::All,
            (Some(false), _) => FpnNormTraining::None,
            (None, MethodName::Full | MethodName::Norm | MethodName::E3va) => FpnNormTraining::All,
            (None, MethodName::Bitfit) => FpnNormTraining::BiasOnly,
            (None, _) => FpnNormTraining::None,
        }
    }

    /// Short label for file names and report rows.
    pub fn label(&self) -> String {
        let mut s = self.name.to_string();
        match self.name {
            MethodName::E3va => s.push_str(&format!("-a{}", self.alpha)),
            MethodName::Adapter | MethodName::Lora | MethodName::Adaptformer => {
                s.push_str(&format!("-d{}", self.adapter_dim))
            }
            _ => {}
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proportional_dim() {
        let m = MethodConfig::new(MethodName::Adapter);
        assert_eq!(m.clone().with_proportional_adapter_dim(REFERENCE_EMBED_DIM).adapter_dim, 64);
        assert_eq!(m.clone().with_proportional_adapter_dim(16).adapter_dim, 8);
        assert_eq!(m.with_proportional_adapter_dim(1).adapter_dim, 1);
    }

    #[test]
    fn parse_names() {
        for m in MethodName::ALL {
            assert_eq!(m.as_str().parse::<MethodName>().unwrap(), m);
        }
        assert!(matches!("vpt".parse::<MethodName>(), Err(Error::UnknownMethod(_))));
    }

    #[test]
    fn json_defaults() {
        let m: MethodConfig = serde_json::from_str(r#"{"name":"e3va","alpha":2}"#).unwrap();
        assert_eq!(m.adapter_dim, 64);
        assert_eq!(m.fpn_norm_training(), FpnNormTraining::All);
        let m: MethodConfig = serde_json::from_str(r#"{"name":"adapter"}"#).unwrap();
        assert_eq!(m.fpn_norm_training(), FpnNormTraining::None);
    }

    #[test]
    fn rejects_zero_rank() {
        assert!(MethodConfig::e3va(0).validate().is_err());
        let mut m = MethodConfig::new(MethodName::Adapter);
        m.trainable_reduction = true;
        assert!(m.validate().is_err());
    }
}
