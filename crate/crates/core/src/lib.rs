//! Joint-embedding predictive pretraining for audio spectrograms.
//!
//! A waveform becomes a log-mel spectrogram, the spectrogram is cut into a
//! grid of patches, and the patch indices are split into disjoint context and
//! target sets. A ViT context encoder embeds the context patches, a narrow
//! ViT predictor guesses the target embeddings from them, and an EMA copy of
//! the encoder provides the targets. Frozen encoders are scored with a
//! linear probe.

pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod frontend;
pub mod fsutil;
pub mod manifest;
pub mod mask;
pub mod model;
pub mod probe;
pub mod synth;
pub mod train;
pub mod wav;

pub use error::{Error, Result};
