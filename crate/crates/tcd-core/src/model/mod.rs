//! Siamese encoder-decoder model: weight-shared hierarchical encoder, a
//! phase-shared semantic decoder and the central change-detection decoder,
//! plus the checkpoint archive format.

mod checkpoint;
mod config;
mod decoder;
mod encoder;
pub mod layers;
mod network;


pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, LoadedCheckpoint, TrainMoments,
    TrainStateHeader, CHECKPOINT_VERSION,
};
pub use config::{ModelConfig, Task, STAGE_STRIDES};
pub use decoder::{DiffMaps, RefinedFeatures};
pub use encoder::{FeaturePyramid, Phase};
pub use network::{ChangeModel, PairForward, PredictionSet};
