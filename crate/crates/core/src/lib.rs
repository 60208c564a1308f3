//! Prompt optimization for pixel-wise anomaly segmentation.
//!
//! Learnable normal/abnormal prompt embeddings are tuned against synthesized
//! object anomalies, with gradients calibrated against a meta-prompt anchor,
//! over a locality-aware transformer image encoder. Everything runs on a
//! procedurally generated toy corpus and is scored by pixel-level AUROC.

pub mod ablation;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod grid;
pub mod oagm;
pub mod pgm;
pub mod prompt;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
