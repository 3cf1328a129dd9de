//! Tiny ViT encoder: patchify, embedding, transformer blocks, and the
//! geometry-only parameter / FLOP accounting.

mod accounting;
mod backbone;
mod config;
mod patch;

pub use accounting::{
    added_param_count, backbone_param_count, count_params, estimate_flops, ParamCount, TunedSpec,
    MLP2_HIDDEN,
};
pub use backbone::{Backbone, BoundBackbone, INIT_STD};
pub use config::BackboneConfig;
pub use patch::{patchify, unpatchify};
