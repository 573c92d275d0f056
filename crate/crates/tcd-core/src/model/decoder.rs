//! Semantic (per-phase) and change-detection decoders.
//!
//! The semantic decoder refines the pyramid top-down: the deeper feature is
//! upsampled, concatenated with the shallower one and unified by a 1x1
//! convolution. The change decoder concatenates the refined deep features
//! of both phases with their absolute difference and fuses progressively
//! shallower absolute differences on the way up.

use rand::Rng;

use crate::tensor::{concat, Ctx, ParamStore, Scalar, Scope, Var};

use super::config::ModelConfig;
use super::encoder::FeaturePyramid;
use super::layers::{ChannelNorm, Conv2d};
use super::Task;

/// 1x1 conv + channel norm + GELU.
struct ConvBlock {
    conv: Conv2d,
    norm: ChannelNorm,
}

impl ConvBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), Scope::Inference, in_ch, out_ch, 1, 1, 0),
            norm: ChannelNorm::new(store, &format!("{name}.norm"), Scope::Inference, out_ch),
        }
    }

    fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        self.norm.forward(cx, self.conv.forward(cx, x)).gelu()
    }
}

/// 3x3 conv + channel norm + GELU + 1x1 conv to logits.
struct PredictionHead {
    conv3: Conv2d,
    norm: ChannelNorm,
    conv1: Conv2d,
}

impl PredictionHead {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Self {
        Self {
            conv3: Conv2d::new(store, rng, &format!("{name}.conv3"), Scope::Inference, in_ch, in_ch, 3, 1, 1),
            norm: ChannelNorm::new(store, &format!("{name}.norm"), Scope::Inference, in_ch),
            conv1: Conv2d::new(store, rng, &format!("{name}.logits"), Scope::Inference, in_ch, out_ch, 1, 1, 0),
        }
    }

    fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        self.conv1.forward(cx, self.norm.forward(cx, self.conv3.forward(cx, x)).gelu())
    }
}

/// Refined multi-scale features of one phase.
pub struct RefinedFeatures<'t, T: Scalar> {
    /// Stage-1 resolution, decoder width.
    pub r1: Var<'t, T>,
    /// Stage-2 resolution, decoder width.
    pub r2: Var<'t, T>,
    /// Stage-4 resolution, stage-4 channel count.
    pub r4: Var<'t, T>,
}

pub struct SegDecoder {
    refine4: ConvBlock,
    fuse43: ConvBlock,
    fuse32: ConvBlock,
    fuse21: ConvBlock,
    sem_head: Option<PredictionHead>,
}

impl SegDecoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let [c1, c2, c3, c4] = cfg.stage_channels;
        let d = cfg.decoder_width;
        Self {
            refine4: ConvBlock::new(store, rng, "seg.refine4", c4, c4),
            fuse43: ConvBlock::new(store, rng, "seg.fuse43", c4 + c3, d),
            fuse32: ConvBlock::new(store, rng, "seg.fuse32", d + c2, d),
            fuse21: ConvBlock::new(store, rng, "seg.fuse21", d + c1, d),
            sem_head: (cfg.task == Task::Scd)
                .then(|| PredictionHead::new(store, rng, "seg.head", d, cfg.num_classes)),
        }
    }

    /// Top-down refinement; semantic logits (at full input resolution) are
    /// produced only when the head exists, i.e. in SCD mode.
    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        pyr: &FeaturePyramid<'t, T>,
        input_hw: (usize, usize),
    ) -> (RefinedFeatures<'t, T>, Option<Var<'t, T>>) {
        let [s1, s2, s3, s4] = pyr.stages;
        let up2 = |v: Var<'t, T>| {
            let sh = v.shape();
            v.upsample_bilinear(sh[2] * 2, sh[3] * 2)
        };
        let r4 = self.refine4.forward(cx, s4);
        let f3 = self.fuse43.forward(cx, concat(&[up2(r4), s3], 1));
        let r2 = self.fuse32.forward(cx, concat(&[up2(f3), s2], 1));
        let r1 = self.fuse21.forward(cx, concat(&[up2(r2), s1], 1));
        let sem = self.sem_head.as_ref().map(|head| {
            head.forward(cx, r1).upsample_bilinear(input_hw.0, input_hw.1)
        });
        (RefinedFeatures { r1, r2, r4 }, sem)
    }
}

/// Absolute-difference maps feeding the change decoder, kept for
/// diagnostics and visualization.
pub struct DiffMaps<'t, T: Scalar> {
    pub d4: Var<'t, T>,
    pub d2: Var<'t, T>,
    pub d1: Var<'t, T>,
}

pub struct CdDecoder {
    deep: ConvBlock,
    fuse2: ConvBlock,
    fuse1: ConvBlock,
    head: PredictionHead,
}

impl CdDecoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let c4 = cfg.stage_channels[3];
        let d = cfg.decoder_width;
        Self {
            deep: ConvBlock::new(store, rng, "cd.deep", 3 * c4, d),
            fuse2: ConvBlock::new(store, rng, "cd.fuse2", 2 * d, d),
            fuse1: ConvBlock::new(store, rng, "cd.fuse1", 2 * d, d),
            head: PredictionHead::new(store, rng, "cd.head", d, 2),
        }
    }

    /// Two-phase refined features to 2-channel change logits at the full
    /// input resolution.
    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        ref1: &RefinedFeatures<'t, T>,
        ref2: &RefinedFeatures<'t, T>,
        input_hw: (usize, usize),
    ) -> (Var<'t, T>, DiffMaps<'t, T>) {
        let d4 = (ref1.r4 - ref2.r4).abs();
        let d2 = (ref1.r2 - ref2.r2).abs();
        let d1 = (ref1.r1 - ref2.r1).abs();

        let deep_in = concat(&[ref1.r4, ref2.r4, d4], 1);
        let mut x = self.deep.forward(cx, deep_in);
        let sh = x.shape();
        x = x.upsample_bilinear(sh[2] * 4, sh[3] * 4); // stage-4 -> stage-2 resolution
        x = self.fuse2.forward(cx, concat(&[x, d2], 1));
        let sh = x.shape();
        x = x.upsample_bilinear(sh[2] * 2, sh[3] * 2); // -> stage-1 resolution
        x = self.fuse1.forward(cx, concat(&[x, d1], 1));
        let logits = self.head.forward(cx, x).upsample_bilinear(input_hw.0, input_hw.1);
        (logits, DiffMaps { d4, d2, d1 })
    }
}
