//! Visual prompt learning as masked visual token modeling, at desk scale.
//!
//! A tiny ViT is pretrained to predict codebook indices of masked patches.
//! Downstream classification keeps that exact form: a `[MASK]` token and a
//! few learnable prompts are appended to the frozen backbone's input, and a
//! prototypical verbalizer maps the `[MASK]` state to class labels.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod mvtm;
pub mod prompt;
pub mod regimes;
pub mod seed;
pub mod tokenizer;
pub mod verbalizer;
pub mod vit;

pub use error::{Error, Result};
