//! Full model assembly: weight-shared encoder, phase-shared semantic
//! decoder, change decoder, and the training-only transition generator.
//!
//! The inference path never touches transition-generator or text-provider
//! state; those parameters exist in the store under [`Scope::Ttg`] purely
//! for the training-time constraints.

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tensor::{CountScope, Ctx, ParamStore, Scalar, Tape, Var};
use crate::ttg::{TransitionGenerator, TtgConfig};

use super::config::ModelConfig;
use super::decoder::{CdDecoder, DiffMaps, RefinedFeatures, SegDecoder};
use super::encoder::{Encoder, FeaturePyramid, Phase};

/// Full-resolution model outputs, detached from any tape.
pub struct PredictionSet<T> {
    /// `[B, 2, H, W]`.
    pub change_logits: ArrayD<T>,
    /// `[B, K, H, W]` per phase; present only in SCD mode.
    pub sem_logits_t1: Option<ArrayD<T>>,
    pub sem_logits_t2: Option<ArrayD<T>>,
}

/// One recorded forward pass over a bi-temporal batch.
pub struct PairForward<'t, T: Scalar> {
    pub change_logits: Var<'t, T>,
    pub sem_logits_t1: Option<Var<'t, T>>,
    pub sem_logits_t2: Option<Var<'t, T>>,
    pub refined_t1: RefinedFeatures<'t, T>,
    pub refined_t2: RefinedFeatures<'t, T>,
    /// Encoder stage-4 tokens `[B, N, C4]` per phase.
    pub stage4_t1: Var<'t, T>,
    pub stage4_t2: Var<'t, T>,
    pub stage4_grid: (usize, usize),
    pub diff_maps: DiffMaps<'t, T>,
}

pub struct ChangeModel<T: Scalar> {
    pub config: ModelConfig,
    pub ttg_config: TtgConfig,
    pub store: ParamStore<T>,
    encoder: Encoder,
    seg: SegDecoder,
    cd: CdDecoder,
    ttg: TransitionGenerator,
}

impl<T: Scalar> ChangeModel<T> {
    pub fn new(config: ModelConfig, ttg_config: TtgConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        ttg_config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&mut store, &mut rng, &config);
        let seg = SegDecoder::new(&mut store, &mut rng, &config);
        let cd = CdDecoder::new(&mut store, &mut rng, &config);
        let ttg = TransitionGenerator::new(
            &mut store,
            &mut rng,
            ttg_config.clone(),
            config.stage_channels[3],
        )?;
        Ok(Self {
            config,
            ttg_config,
            store,
            encoder,
            seg,
            cd,
            ttg,
        })
    }

    pub fn ttg(&self) -> &TransitionGenerator {
        &self.ttg
    }

    pub fn ctx<'t>(&'t self, tape: &'t Tape<T>) -> Ctx<'t, T> {
        Ctx::new(tape, &self.store)
    }

    /// Number of trainable scalars in the requested scope.
    pub fn param_count(&self, scope: CountScope) -> usize {
        self.store.param_count(scope)
    }

    fn check_raster(&self, x: &ArrayD<T>) -> Result<(usize, usize)> {
        let sh = x.shape();
        if sh.len() != 4 || sh[1] != self.config.in_channels {
            return Err(Error::Shape {
                context: "input raster".into(),
                expected: vec![0, self.config.in_channels, 0, 0],
                found: sh.to_vec(),
            });
        }
        self.config.check_input_dims(sh[2], sh[3])?;
        Ok((sh[2], sh[3]))
    }

    /// Encode one phase of a batch through the shared encoder.
    pub fn encode<'t>(
        &self,
        cx: &Ctx<'t, T>,
        x: Var<'t, T>,
        phase: Phase,
    ) -> Result<FeaturePyramid<'t, T>> {
        let sh = x.shape();
        self.config.check_input_dims(sh[2], sh[3])?;
        self.encoder.forward(cx, x, phase)
    }

    /// Refine one phase's pyramid; semantic logits in SCD mode only.
    pub fn seg_decode<'t>(
        &self,
        cx: &Ctx<'t, T>,
        pyr: &FeaturePyramid<'t, T>,
        input_hw: (usize, usize),
    ) -> (RefinedFeatures<'t, T>, Option<Var<'t, T>>) {
        self.seg.forward(cx, pyr, input_hw)
    }

    /// Fuse the two phases' refined features into change logits.
    pub fn cd_decode<'t>(
        &self,
        cx: &Ctx<'t, T>,
        ref1: &RefinedFeatures<'t, T>,
        ref2: &RefinedFeatures<'t, T>,
        input_hw: (usize, usize),
    ) -> (Var<'t, T>, DiffMaps<'t, T>) {
        self.cd.forward(cx, ref1, ref2, input_hw)
    }

    /// Record the full bi-temporal forward pass on `tape`.
    pub fn forward_pair<'t>(
        &'t self,
        tape: &'t Tape<T>,
        x1: &ArrayD<T>,
        x2: &ArrayD<T>,
    ) -> Result<PairForward<'t, T>> {
        let hw1 = self.check_raster(x1)?;
        let hw2 = self.check_raster(x2)?;
        if hw1 != hw2 || x1.shape() != x2.shape() {
            return Err(Error::Shape {
                context: "bi-temporal pair".into(),
                expected: x1.shape().to_vec(),
                found: x2.shape().to_vec(),
            });
        }
        let cx = self.ctx(tape);
        let v1 = tape.constant(x1.clone());
        let v2 = tape.constant(x2.clone());
        let pyr1 = self.encode(&cx, v1, Phase::T1)?;
        let pyr2 = self.encode(&cx, v2, Phase::T2)?;
        let stage4_grid = pyr1.stage4_grid();
        let stage4_t1 = pyr1.stage4_tokens();
        let stage4_t2 = pyr2.stage4_tokens();
        let (refined_t1, sem_logits_t1) = self.seg_decode(&cx, &pyr1, hw1);
        let (refined_t2, sem_logits_t2) = self.seg_decode(&cx, &pyr2, hw1);
        let (change_logits, diff_maps) = self.cd_decode(&cx, &refined_t1, &refined_t2, hw1);
        Ok(PairForward {
            change_logits,
            sem_logits_t1,
            sem_logits_t2,
            refined_t1,
            refined_t2,
            stage4_t1,
            stage4_t2,
            stage4_grid,
            diff_maps,
        })
    }

    /// Plain inference: encode, refine, fuse. Reads no transition-generator
    /// or text-provider state.
    pub fn forward_inference(&self, x1: &ArrayD<T>, x2: &ArrayD<T>) -> Result<PredictionSet<T>> {
        let tape = Tape::new();
        let fwd = self.forward_pair(&tape, x1, x2)?;
        Ok(PredictionSet {
            change_logits: fwd.change_logits.value(),
            sem_logits_t1: fwd.sem_logits_t1.map(|v| v.value()),
            sem_logits_t2: fwd.sem_logits_t2.map(|v| v.value()),
        })
    }
}
