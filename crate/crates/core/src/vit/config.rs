use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of the ViT encoder and its masked-token vocabulary head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    /// 32x32 grayscale, 4x4 patches, d=64, four blocks, 64 visual tokens.
    pub fn desk() -> Self {
        BackboneConfig {
            image_size: 32,
            channels: 1,
            patch_size: 4,
            hidden_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            vocab_size: 64,
        }
    }

    /// ViT-Base/16 at 224x224 with an 8192-entry visual vocabulary.
    pub fn vit_base() -> Self {
        BackboneConfig {
            image_size: 224,
            channels: 3,
            patch_size: 16,
            hidden_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            vocab_size: 8192,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if self.channels == 0 || self.hidden_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("zero-sized dimension".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocabulary needs at least two tokens".into()));
        }
        Ok(())
    }

    /// Patch grid as `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.hidden_dim * self.mlp_ratio
    }
}
