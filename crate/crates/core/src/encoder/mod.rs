//! Dual transformer encoder with deep prompting and cross-modal prompt
//! fusion.
//!
//! Each encoder sees `[pool, slots, content]`. The `L` slot tokens start at
//! zero; entering each of the first `D` layers they receive that layer's
//! prompt additively, and from the second prompted layer on they may be
//! blended with an affine map of the other modality's slots.

mod backbone;
mod config;
mod forward;
mod pretrain;
mod prompts;

pub use backbone::{Backbone, BackboneParams, EncoderParams, LayerParams};
pub use config::{BackboneConfig, Modality};
pub use forward::{encode, encode_pair, fuse, Encoded, Input, PairEncoded};
pub use pretrain::{in_batch_recall_at_1, plain_features, pretrain_backbone, PretrainOptions};
pub use prompts::{BoundFusion, BoundPrompts, FusionParams, PromptConfig, PromptParams, PromptSet};
