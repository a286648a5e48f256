//! Transcription-free cross-lingual voice conversion.
//!
//! Speech from any language is mapped to phonetic features by a monolingual
//! acoustic model, paired with a target speaker's d-vector, converted to a
//! log-mel spectrogram of the same length by a locally attending seq2seq
//! model, and rendered to audio by Griffin-Lim or a conditional flow.

pub mod acoustic;
pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod conversion;
pub mod error;
pub mod features;
pub mod manifest;
pub mod nn;
pub mod pipeline;
pub mod speaker;
pub mod toy;
pub mod vocoder;

pub use error::{Error, Result};
