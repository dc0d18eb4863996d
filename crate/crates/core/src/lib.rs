//! Context-aware multi-speaker audiobook text-to-speech acoustic model.
//!
//! The crate covers the whole desk-scale pipeline: an ordered audiobook
//! corpus model with a synthetic generator, a FastSpeech2-style acoustic model
//! with relative self-attention, acoustic (GST) and textual context encoders,
//! training with an ablation matrix, chained book synthesis, and DTW-based
//! prosody metrics.

pub mod acoustic_context;
pub mod autograd;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod text_context;
pub mod training;
pub mod tts;

pub use error::{Error, Result};
