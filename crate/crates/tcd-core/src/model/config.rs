//! Model configuration and shape arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed downsample factor of each encoder stage relative to the input.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Detection task flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Binary change detection: only the change branch is supervised.
    Bcd,
    /// Semantic change detection: change branch plus per-phase semantics.
    Scd,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Task::Bcd => write!(f, "bcd"),
            Task::Scd => write!(f, "scd"),
        }
    }
}

fn default_in_channels() -> usize {
    3
}
fn default_stage_channels() -> [usize; 4] {
    [16, 32, 64, 128]
}
fn default_fusion_dim() -> usize {
    256
}
fn default_decoder_width() -> usize {
    64
}

/// Architecture hyper-parameters for the siamese encoder-decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Encoder output channels per stage, strictly increasing.
    #[serde(default = "default_stage_channels")]
    pub stage_channels: [usize; 4],
    /// Number of semantic categories K.
    pub num_classes: usize,
    pub task: Task,
    /// Unified text-vision fusion width D consumed by the transition generator.
    #[serde(default = "default_fusion_dim")]
    pub fusion_dim: usize,
    /// Channel width of the refined decoder features (D').
    #[serde(default = "default_decoder_width")]
    pub decoder_width: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.stage_channels.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "stage_channels must be strictly increasing, got {:?}",
                self.stage_channels
            )));
        }
        let min_classes = match self.task {
            Task::Bcd => 1,
            Task::Scd => 2,
        };
        if self.num_classes < min_classes {
            return Err(Error::Config(format!(
                "num_classes must be >= {min_classes} for {}, got {}",
                self.task, self.num_classes
            )));
        }
        if self.fusion_dim == 0 || self.decoder_width == 0 {
            return Err(Error::Config("fusion_dim and decoder_width must be positive".into()));
        }
        Ok(())
    }

    /// Checks that an input of `h x w` is compatible with the stride schedule.
    pub fn check_input_dims(&self, h: usize, w: usize) -> Result<()> {
        let by = STAGE_STRIDES[3];
        if h % by != 0 {
            return Err(Error::NotDivisible {
                context: "encoder input",
                axis: "height",
                value: h,
                by,
            });
        }
        if w % by != 0 {
            return Err(Error::NotDivisible {
                context: "encoder input",
                axis: "width",
                value: w,
                by,
            });
        }
        Ok(())
    }

    /// Spatial size of stage `s` (0-based) for an input of `h x w`.
    pub fn stage_dims(&self, s: usize, h: usize, w: usize) -> (usize, usize) {
        (h / STAGE_STRIDES[s], w / STAGE_STRIDES[s])
    }

    /// Stage-4 token count for an input of `h x w`.
    pub fn stage4_tokens(&self, h: usize, w: usize) -> usize {
        let (th, tw) = self.stage_dims(3, h, w);
        th * tw
    }
}
