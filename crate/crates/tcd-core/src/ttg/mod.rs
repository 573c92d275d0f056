//! Text-guided transition generator: projects class-name embeddings into
//! the fusion space and injects them into stage-4 visual tokens to produce
//! per-phase transition features.

mod asi;
mod fusion;
mod text;

#[cfg(test)]
mod tests;

pub use asi::{AdaptiveSemanticIntegration, BypassProjection, ClassProjection};
pub use fusion::{CrossModalFusion, POS_GRID};
pub use text::{
    text_provider_load, write_embedding_file, ClassEmbeddingSet, EmbeddingSource, PROMPT_TEMPLATE,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Ctx, ParamStore, Scalar, Var};

fn default_experts() -> usize {
    6
}
fn default_fusion_dim() -> usize {
    256
}
fn default_layers() -> usize {
    6
}
fn default_heads() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_text_dim() -> usize {
    512
}

/// Transition-generator hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtgConfig {
    /// Number of expert projections M in the soft mixture.
    #[serde(default = "default_experts")]
    pub num_experts: usize,
    /// Unified text-vision width D.
    #[serde(default = "default_fusion_dim")]
    pub fusion_dim: usize,
    /// Stacked decoder layers L.
    #[serde(default = "default_layers")]
    pub decoder_layers: usize,
    #[serde(default = "default_heads")]
    pub attention_heads: usize,
    /// When off, the expert mixture is replaced by a single linear bypass.
    #[serde(default = "default_true")]
    pub asi_enabled: bool,
    /// Width of the frozen text embeddings D_t.
    #[serde(default = "default_text_dim")]
    pub text_dim: usize,
}

impl Default for TtgConfig {
    fn default() -> Self {
        Self {
            num_experts: default_experts(),
            fusion_dim: default_fusion_dim(),
            decoder_layers: default_layers(),
            attention_heads: default_heads(),
            asi_enabled: true,
            text_dim: default_text_dim(),
        }
    }
}

impl TtgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::Config("num_experts must be >= 1".into()));
        }
        if self.fusion_dim == 0 || self.fusion_dim % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "fusion_dim {} must be positive and divisible by {} heads",
                self.fusion_dim, self.attention_heads
            )));
        }
        if self.text_dim == 0 {
            return Err(Error::Config("text_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Class projection plus cross-modal fusion, sharing one set of weights
/// across both temporal phases.
#[derive(Debug, Clone)]
pub struct TransitionGenerator {
    pub config: TtgConfig,
    projection: ClassProjection,
    fusion: CrossModalFusion,
}

impl TransitionGenerator {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        config: TtgConfig,
        visual_dim: usize,
    ) -> Result<Self> {
        config.validate()?;
        let projection = if config.asi_enabled {
            ClassProjection::Asi(AdaptiveSemanticIntegration::new(
                store,
                rng,
                "ttg.asi",
                config.text_dim,
                config.fusion_dim,
                config.num_experts,
            ))
        } else {
            ClassProjection::Bypass(BypassProjection::new(
                store,
                rng,
                "ttg.bypass",
                config.text_dim,
                config.fusion_dim,
            ))
        };
        let fusion = CrossModalFusion::new(
            store,
            rng,
            "ttg.fusion",
            visual_dim,
            config.fusion_dim,
            config.decoder_layers,
            config.attention_heads,
        );
        Ok(Self {
            config,
            projection,
            fusion,
        })
    }

    pub fn projection(&self) -> &ClassProjection {
        &self.projection
    }

    /// Project frozen class embeddings `[K, text_dim]` into `[K, fusion_dim]`.
    /// Computed once per batch; the class set does not vary inside a batch.
    pub fn project_classes<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, t_class: Var<'t, T>) -> Var<'t, T> {
        self.projection.forward(cx, t_class)
    }

    /// Transition feature for one phase from its stage-4 tokens.
    pub fn generate<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        stage4_tokens: Var<'t, T>,
        grid: (usize, usize),
        z: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.fusion.forward(cx, stage4_tokens, grid, z)
    }
}
