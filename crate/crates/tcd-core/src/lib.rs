//! Bi-temporal change detection with transition-consistency training.
//!
//! The crate is organised around a small reverse-mode autodiff engine
//! ([`tensor`]) on top of which the model, the auxiliary consistency
//! objectives and the training harness are built:
//!
//! - [`model`] — siamese hierarchical encoder, per-phase semantic decoders
//!   and the central change-detection decoder.
//! - [`ttg`] — text-guided transition generator: class-embedding provider,
//!   soft mixture-of-experts projection and cross-modal fusion.
//! - [`consistency`] — feature reconstruction mappings, token labelling and
//!   the contrastive / alignment losses.
//! - [`metrics`] — confusion-matrix accumulation, binary and semantic
//!   change-detection metrics, change-size stratified reporting.
//! - [`data`] — directory dataset readers and the seeded synthetic
//!   bi-temporal generator.
//! - [`train`] — run configuration, Adam, the training loop, checkpointing
//!   and the ablation harness.
//! - [`viz`] — heat-map rendering for differential features and
//!   reconstruction similarity.

pub mod consistency;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
pub mod ttg;
pub mod viz;

pub use error::{Error, Result};
