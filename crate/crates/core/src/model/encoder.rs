use candle_core::Tensor;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, LayerNorm, Linear, Mlp};
use crate::params::ParamStore;

pub const PATCH_EMBED: &str = "encoder.patch_embed";
pub const POS_EMBED: &str = "encoder.pos_embed";
pub const FINAL_NORM: &str = "encoder.norm";

/// Pre-norm transformer block:
/// `x += proj(attn(qkv(norm1(x))))`, then `x += fc2(gelu(fc1(norm2(x))))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
}

impl EncoderBlock {
    pub fn load(store: &ParamStore, index: usize, heads: usize) -> Result<Self> {
        let p = format!("encoder.blocks.{index}");
        Ok(Self {
            norm1: LayerNorm::load(store, &format!("{p}.norm1"))?,
            qkv: Linear::load(store, &format!("{p}.attn.qkv"))?,
            proj: Linear::load(store, &format!("{p}.attn.proj"))?,
            norm2: LayerNorm::load(store, &format!("{p}.norm2"))?,
            mlp: Mlp::load(store, &format!("{p}.mlp"))?,
            heads,
        })
    }

    /// Attention sub-layer output (before the residual add).
    pub fn attend(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.dims()[2];
        let qkv = self.qkv.forward(&self.norm1.forward(x)?)?;
        let q = qkv.narrow(2, 0, d)?;
        let k = qkv.narrow(2, d, d)?;
        let v = qkv.narrow(2, 2 * d, d)?;
        self.proj.forward(&multi_head_attention(&q, &k, &v, self.heads)?)
    }

    /// `(B, T, D)` → `(B, T, D)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attend(x)?)?;
        let m = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((x + m)?)
    }
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    patch_embed: Linear,
    pos_embed: Tensor,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
    config: ModelConfig,
}

impl ImageEncoder {
    pub fn load(store: &ParamStore, config: &ModelConfig) -> Result<Self> {
        let pos = store.get(POS_EMBED)?;
        let g = config.grid();
        if pos.dims() != [g, g, config.embed_dim] {
            return Err(Error::Shape(format!(
                "pos_embed has shape {:?}, config expects [{g}, {g}, {}]",
                pos.dims(),
                config.embed_dim
            )));
        }
        Ok(Self {
            patch_embed: Linear::load(store, PATCH_EMBED)?,
            pos_embed: pos.reshape((g * g, config.embed_dim))?,
            blocks: (0..config.depth)
                .map(|n| EncoderBlock::load(store, n, config.num_heads))
                .collect::<Result<_>>()?,
            norm: LayerNorm::load(store, FINAL_NORM)?,
            config: config.clone(),
        })
    }

    pub fn blocks(&self) -> &[EncoderBlock] {
        &self.blocks
    }

    /// `(B, H, W, C)` → `(B, T, P·P·C)` with row-major patch order.
    pub fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let dims = images.dims();
        if dims.len() != 4 || dims[1..] != [c.image_size, c.image_size, c.in_channels] {
            return Err(Error::Shape(format!(
                "encoder expects images of shape (B, {0}, {0}, {1}), got {dims:?}",
                c.image_size, c.in_channels
            )));
        }
        let (b, g, p) = (dims[0], c.grid(), c.patch_size);
        Ok(images
            .reshape((b, g, p, g, p, c.in_channels))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, g * g, c.patch_features()))?)
    }

    /// Patch tokens with positional embeddings added, before any block.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let tokens = self.patch_embed.forward(&self.patchify(images)?)?;
        Ok(tokens.broadcast_add(&self.pos_embed)?)
    }

    /// `(B, H, W, C)` → `(B, T, D)`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = self.embed(images)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        self.norm.forward(&x)
    }
}
