//! Architecture documents: backbone blocks, top-down/lateral pairs and detector heads.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::DetectorConfig;
use crate::error::{Result, TdmError};
use crate::ops::PoolRounding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub height: usize,
    pub width: usize,
}

fn default_kernel() -> usize {
    3
}

fn one() -> usize {
    1
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

/// One bottom-up block `C_i`: `num_convs` conv+ReLU layers, optionally
/// followed by a 2x2/stride-2 max pool. `stride` and `first_pad` apply to the
/// first conv only; `pad` defaults to "same" padding for the dilated kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub num_convs: usize,
    pub channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default)]
    pub pool_after: bool,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "one")]
    pub dilation: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_pad: Option<usize>,
    /// Odd-size handling of the trailing pool, `[rows, cols]`.
    #[serde(default, skip_serializing_if = "is_default")]
    pub pool_rounding: [PoolRounding; 2],
}

impl BlockSpec {
    pub fn conv_pad(&self) -> usize {
        self.pad
            .unwrap_or(self.dilation * (self.kernel.saturating_sub(1)) / 2)
    }

    pub fn first_conv_pad(&self) -> usize {
        self.first_pad.unwrap_or_else(|| self.conv_pad())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    #[serde(default = "three")]
    pub input_channels: usize,
    pub blocks: Vec<BlockSpec>,
    /// Block ids whose outputs are exposed; the topmost block is always tapped.
    #[serde(default)]
    pub taps: Vec<String>,
}

fn three() -> usize {
    3
}

impl BackboneConfig {
    pub fn block_index(&self, id: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.id == id)
    }

    pub fn top(&self) -> &BlockSpec {
        self.blocks.last().expect("validated backbone has blocks")
    }

    /// Tapped block indices, bottom-up, always including the top block.
    pub fn tap_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self
            .taps
            .iter()
            .filter_map(|t| self.block_index(t))
            .collect();
        if !self.blocks.is_empty() {
            idx.push(self.blocks.len() - 1);
        }
        idx.sort_unstable();
        idx.dedup();
        idx
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(TdmError::Config("backbone has no blocks".into()));
        }
        if self.input_channels == 0 {
            return Err(TdmError::Config("input_channels must be positive".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.num_convs == 0 || b.dilation == 0 || b.stride == 0 || b.kernel == 0
            {
                return Err(TdmError::Config(format!(
                    "block {} needs positive channels, num_convs, kernel, stride and dilation",
                    b.id
                )));
            }
            if self.blocks[..i].iter().any(|o| o.id == b.id) {
                return Err(TdmError::Config(format!("duplicate block id {}", b.id)));
            }
        }
        for t in &self.taps {
            if self.block_index(t).is_none() {
                return Err(TdmError::Config(format!("tap {} is not a block id", t)));
            }
        }
        Ok(())
    }
}

/// One progressive-growth step: lateral `L_to`, top-down `T_{from,to}`
/// and the output module used while this pair is the lowest one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub from: String,
    pub to: String,
    /// Output channels of `T_{from,to}`.
    pub t: usize,
    /// Output channels of `L_to`.
    pub l: usize,
    pub upsample: bool,
    pub t_out: usize,
    #[serde(default)]
    pub use_1x1: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TdmConfig {
    #[serde(default)]
    pub pairs: Vec<PairSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub name: String,
    pub input: InputSpec,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub tdm: TdmConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<DetectorConfig>,
}

impl ArchConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ArchConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TdmError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            TdmError::Json(j) => TdmError::Parse {
                path: path.display().to_string(),
                line: j.line(),
                column: j.column(),
                message: j.to_string(),
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        crate::tdm::validate_pairs(self)?;
        if let Some(d) = &self.detector {
            d.validate()?;
        }
        Ok(())
    }

    pub fn detector(&self) -> Result<&DetectorConfig> {
        self.detector
            .as_ref()
            .ok_or_else(|| TdmError::Config(format!("{} has no detector section", self.name)))
    }

    /// Non-fatal design-principle warnings: lateral and top-down modules
    /// should reduce dimensionality.
    pub fn warnings(&self) -> Vec<String> {
        crate::tdm::design_warnings(self)
    }
}
