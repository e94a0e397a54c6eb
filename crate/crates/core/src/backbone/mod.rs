//! Toy vision transformer with prompt-token injection.
//!
//! Tokens are laid out as `[class, prompts, image]` at every layer. The
//! backbone weights are frozen during prompt tuning; only the classification
//! head is trainable.

mod config;
mod forward;
mod params;

pub use config::{PositionEncoding, ViTConfig};
pub use forward::{
    attention_probabilities, block_forward, classify, embed_patches, forward_plain,
    forward_vpt_deep, forward_vpt_shallow, head, layer_forward, patchify,
    sinusoidal_positions, TokenSequence,
};
pub use params::{BackboneParams, BackboneVars, HeadParams, HeadVars, LayerParams, LayerVars};

/// Layer-norm epsilon used throughout the backbone.
pub const LAYER_NORM_EPS: f64 = 1e-5;
