use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the promptable segmentation model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    /// Encoder width `D`.
    pub embed_dim: usize,
    /// Number of encoder blocks `N`.
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    /// Text embedding width `E`.
    pub prompt_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub decoder_mlp_hidden: usize,
    /// Channels per output pixel in the decoder's upscaled embedding.
    pub upscale_channels: usize,
    pub tal_activation: TalActivation,
}

/// Optional nonlinearity after the text affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TalActivation {
    #[default]
    None,
    Relu,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// The default toy configuration: N=4, D=128, 4 heads, 128×128 images,
    /// 16-pixel patches.
    pub fn toy() -> Self {
        Self {
            image_size: 128,
            patch_size: 16,
            in_channels: 3,
            embed_dim: 128,
            depth: 4,
            num_heads: 4,
            mlp_hidden: 512,
            prompt_dim: 64,
            decoder_depth: 2,
            decoder_heads: 4,
            decoder_mlp_hidden: 1024,
            upscale_channels: 8,
            tal_activation: TalActivation::None,
        }
    }

    /// Smaller model used for the CPU-scale adaptation experiment.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            in_channels: 3,
            embed_dim: 64,
            depth: 3,
            num_heads: 4,
            mlp_hidden: 256,
            prompt_dim: 64,
            decoder_depth: 2,
            decoder_heads: 4,
            decoder_mlp_hidden: 256,
            upscale_channels: 8,
            tal_activation: TalActivation::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("in_channels", self.in_channels),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("num_heads", self.num_heads),
            ("mlp_hidden", self.mlp_hidden),
            ("prompt_dim", self.prompt_dim),
            ("decoder_heads", self.decoder_heads),
            ("decoder_mlp_hidden", self.decoder_mlp_hidden),
            ("upscale_channels", self.upscale_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.embed_dim % self.decoder_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by decoder_heads {}",
                self.embed_dim, self.decoder_heads
            )));
        }
        Ok(())
    }

    /// Side length `G` of the patch grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_features(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_grid_is_eight() {
        let c = ModelConfig::toy();
        c.validate().unwrap();
        assert_eq!(c.grid(), 8);
    }

    #[test]
    fn indivisible_image_size_is_rejected() {
        let c = ModelConfig {
            image_size: 130,
            ..ModelConfig::toy()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
