//! Four-stage hierarchical encoder: overlapping conv patch embeddings with
//! two attention blocks per stage. Keys and values are spatially reduced
//! by average pooling in the early, high-resolution stages.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Ctx, ParamStore, Scalar, Scope, Var};

use super::config::{ModelConfig, STAGE_STRIDES};
use super::layers::{map_to_tokens, tokens_to_map, Conv2d, LayerNorm, Linear, MultiHeadAttention};

const HEADS: [usize; 4] = [1, 2, 4, 4];
const SR_RATIO: [usize; 4] = [8, 4, 2, 1];
const BLOCKS_PER_STAGE: usize = 2;
const MLP_RATIO: usize = 2;

/// Temporal phase tag carried by a feature pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    T1,
    T2,
}

/// Multi-resolution encoder output for one phase.
pub struct FeaturePyramid<'t, T: Scalar> {
    /// Stage feature maps `[B, C_s, H/stride_s, W/stride_s]`.
    pub stages: [Var<'t, T>; 4],
    pub phase: Phase,
}

impl<'t, T: Scalar> FeaturePyramid<'t, T> {
    /// Spatial grid of the deepest stage.
    pub fn stage4_grid(&self) -> (usize, usize) {
        let s = self.stages[3].shape();
        (s[2], s[3])
    }

    /// Deepest stage as tokens `[B, N, C4]`.
    pub fn stage4_tokens(&self) -> Var<'t, T> {
        map_to_tokens(self.stages[3])
    }
}

struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

struct Block {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

struct Stage {
    patch: Conv2d,
    norm_embed: LayerNorm,
    blocks: Vec<Block>,
    norm_out: LayerNorm,
    sr: usize,
}

pub struct Encoder {
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let (in_ch, kernel, stride, pad) = if s == 0 {
                (cfg.in_channels, 7, STAGE_STRIDES[0], 3)
            } else {
                (cfg.stage_channels[s - 1], 3, 2, 1)
            };
            let ch = cfg.stage_channels[s];
            let name = format!("encoder.stage{}", s + 1);
            let patch = Conv2d::new(store, rng, &format!("{name}.patch"), Scope::Inference, in_ch, ch, kernel, stride, pad);
            let norm_embed = LayerNorm::new(store, &format!("{name}.embed_norm"), Scope::Inference, ch);
            let blocks = (0..BLOCKS_PER_STAGE)
                .map(|b| {
                    let bname = format!("{name}.block{b}");
                    Block {
                        norm1: LayerNorm::new(store, &format!("{bname}.norm1"), Scope::Inference, ch),
                        attn: MultiHeadAttention::new(store, rng, &format!("{bname}.attn"), Scope::Inference, ch, HEADS[s]),
                        norm2: LayerNorm::new(store, &format!("{bname}.norm2"), Scope::Inference, ch),
                        mlp: Mlp {
                            fc1: Linear::new(store, rng, &format!("{bname}.mlp.fc1"), Scope::Inference, ch, ch * MLP_RATIO, true),
                            fc2: Linear::new(store, rng, &format!("{bname}.mlp.fc2"), Scope::Inference, ch * MLP_RATIO, ch, true),
                        },
                    }
                })
                .collect();
            let norm_out = LayerNorm::new(store, &format!("{name}.out_norm"), Scope::Inference, ch);
            stages.push(Stage {
                patch,
                norm_embed,
                blocks,
                norm_out,
                sr: SR_RATIO[s],
            });
        }
        Self { stages }
    }

    /// `[B, C, H, W]` raster to a four-stage pyramid. H and W must be
    /// divisible by 32 (checked by the caller against the config).
    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        x: Var<'t, T>,
        phase: Phase,
    ) -> Result<FeaturePyramid<'t, T>> {
        let mut maps: Vec<Var<'t, T>> = Vec::with_capacity(4);
        let mut current = x;
        for stage in &self.stages {
            let embedded = stage.patch.forward(cx, current);
            let shape = embedded.shape();
            let (h, w) = (shape[2], shape[3]);
            let mut tokens = stage.norm_embed.forward(cx, map_to_tokens(embedded));
            for block in &stage.blocks {
                let normed = block.norm1.forward(cx, tokens);
                let kv = if stage.sr > 1 {
                    map_to_tokens(tokens_to_map(normed, h, w).avg_pool2d(stage.sr))
                } else {
                    normed
                };
                tokens = tokens + block.attn.forward(cx, normed, kv);
                let normed2 = block.norm2.forward(cx, tokens);
                tokens = tokens + block.mlp.fc2.forward(cx, block.mlp.fc1.forward(cx, normed2).gelu());
            }
            tokens = stage.norm_out.forward(cx, tokens);
            let map = tokens_to_map(tokens, h, w);
            maps.push(map);
            current = map;
        }
        let stages: [Var<'t, T>; 4] = [maps[0], maps[1], maps[2], maps[3]];
        Ok(FeaturePyramid { stages, phase })
    }
}
