//! Multi-level word adapter model for joint intent detection and slot
//! filling on Chinese text.
//!
//! The crate covers the full pipeline: corpus parsing and alignment,
//! word segmentation, a small reverse-mode autodiff engine, the encoder,
//! word adapters and decoders, chunk-based metrics and the training loop.

pub mod adapters;
pub mod corpus;
pub mod decoders;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod segmentation;
pub mod training;

pub use decoders::{AblationMode, Feed, Model, ModelConfig, Phase};
pub use error::{Error, Result};
pub use metrics::{compute_metrics, extract_chunks, Metrics};
pub use training::{train, ModelArtifact, TrainConfig, TrainReport};
