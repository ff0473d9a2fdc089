//! Dual-encoder transformer classifier.
//!
//! The vision branch prepends a classification token to a sequence of
//! pre-extracted patch features; the text branch embeds token ids and pools
//! the last non-padding position. Both pooled states are projected into a
//! shared space, concatenated, and fed to a linear head.

mod batch;
pub mod checkpoint;
mod config;
mod model;

pub use batch::Batch;
pub use config::EncoderConfig;
pub use model::{
    Branch, BranchKind, DualEncoderModel, Encoded, ForwardOutput, LayerNormParams, Linear, TextBranch,
    TransformerLayer, VisionBranch,
};
pub(crate) use model::PromptSide;

/// Token id reserved for padding.
pub const PAD_ID: usize = 0;
