//! Staged compression of a toy encoder-decoder transformer.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors with a reverse-mode gradient tape.
//! * [`model`]: the encoder-decoder transformer (rotary attention, SwiGLU,
//!   RMS norm) and its on-disk checkpoint format.
//! * [`corpus`]: privacy scrubbing, cleaning, language filtering,
//!   three-level deduplication, byte-fallback BPE and token statistics.
//! * [`denoising`]: the seven R/S/X denoisers and example construction.
//! * [`curriculum`]: loss-driven reweighting of the denoiser mixture.
//! * [`packing`]: fixed-shape mix-denoising batches and padding metrics.
//! * [`pruning`]: layer, neuron and vocabulary pruning plus direct-prune sweeps.
//! * [`trainer`]: cosine schedule, AdamW, stage loop and the five-stage pipeline.

pub mod corpus;
pub mod curriculum;
pub mod denoising;
pub mod error;
pub mod model;
pub mod packing;
pub mod pruning;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
