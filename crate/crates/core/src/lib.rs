//! Score-based diffusion for target speaker extraction.
//!
//! A target source is recovered from a two-source mixture by running a
//! reverse-time mean-reverting SDE in the compressed complex STFT domain,
//! guided by a score network conditioned on a fixed-length speaker embedding.

pub mod audio;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod embeddings;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod sde;
pub mod stft;
pub mod training;

pub use error::{Error, Result};
