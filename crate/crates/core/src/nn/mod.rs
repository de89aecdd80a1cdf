//! Score network and its building blocks.

pub mod checkpoint;
pub mod ops;
pub mod params;
pub mod unet;

pub use checkpoint::{ScoreNetworkCheckpoint, TrainingMetadata};
pub use ops::Tensor;
pub use params::{ParamLayout, ParamRef, Segment};
pub use unet::{time_embedding, ForwardCache, NetworkConfig, ScoreNetwork};
