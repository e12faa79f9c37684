use candle_core::Tensor;

use super::ModelConfig;
use crate::error::Result;
use crate::nn::{Attention, LayerNorm, Linear, Mlp};
use crate::params::ParamStore;

pub const MASK_TOKEN: &str = "decoder.mask_token";

#[derive(Debug, Clone)]
struct TwoWayLayer {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_token_to_image: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    cross_image_to_token: Attention,
    norm4: LayerNorm,
}

impl TwoWayLayer {
    fn load(store: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        let ln = |n: &str| LayerNorm::load(store, &format!("{prefix}.{n}"));
        let at = |n: &str| Attention::load(store, &format!("{prefix}.{n}"), heads);
        Ok(Self {
            self_attn: at("self_attn")?,
            norm1: ln("norm1")?,
            cross_token_to_image: at("cross_token_to_image")?,
            norm2: ln("norm2")?,
            mlp: Mlp::load(store, &format!("{prefix}.mlp"))?,
            norm3: ln("norm3")?,
            cross_image_to_token: at("cross_image_to_token")?,
            norm4: ln("norm4")?,
        })
    }

    fn forward(&self, tokens: &Tensor, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let t = self.norm1.forward(&(tokens + self.self_attn.forward(tokens, tokens)?)?)?;
        let t = self
            .norm2
            .forward(&(&t + self.cross_token_to_image.forward(&t, image)?)?)?;
        let t = self.norm3.forward(&(&t + self.mlp.forward(&t)?)?)?;
        let img = self
            .norm4
            .forward(&(image + self.cross_image_to_token.forward(image, &t)?)?)?;
        Ok((t, img))
    }
}

/// Two-way attention decoder with a single mask token. The mask is the
/// per-pixel dot product between an upscaled image embedding and a vector
/// produced from the mask token.
#[derive(Debug, Clone)]
pub struct MaskDecoder {
    mask_token: Tensor,
    layers: Vec<TwoWayLayer>,
    final_attn: Attention,
    final_norm: LayerNorm,
    upscale: Linear,
    hyper: Mlp,
    config: ModelConfig,
}

impl MaskDecoder {
    pub fn load(store: &ParamStore, config: &ModelConfig) -> Result<Self> {
        let heads = config.decoder_heads;
        Ok(Self {
            mask_token: store.get(MASK_TOKEN)?,
            layers: (0..config.decoder_depth)
                .map(|l| TwoWayLayer::load(store, &format!("decoder.layers.{l}"), heads))
                .collect::<Result<_>>()?,
            final_attn: Attention::load(store, "decoder.final_attn", heads)?,
            final_norm: LayerNorm::load(store, "decoder.final_norm")?,
            upscale: Linear::load(store, "decoder.upscale")?,
            hyper: Mlp::load(store, "decoder.hyper")?,
            config: config.clone(),
        })
    }

    /// `image: (B, T, D)`, `prompt_tokens: (B, P, D)` → logits `(B, H, W)`.
    pub fn forward(&self, image: &Tensor, prompt_tokens: &Tensor) -> Result<Tensor> {
        let (b, _, d) = image.dims3()?;
        let mask_token = self.mask_token.broadcast_as((b, 1, d))?;
        let mut tokens = Tensor::cat(&[&mask_token, prompt_tokens], 1)?;
        // Dense prompt path: the mean prompt token is added to every image
        // token before the two-way layers.
        let mut img = image.broadcast_add(&prompt_tokens.mean_keepdim(1)?)?;
        for layer in &self.layers {
            let (t, i) = layer.forward(&tokens, &img)?;
            tokens = t;
            img = i;
        }
        let tokens = self
            .final_norm
            .forward(&(&tokens + self.final_attn.forward(&tokens, &img)?)?)?;

        let c = &self.config;
        let (g, p, ch) = (c.grid(), c.patch_size, c.upscale_channels);
        let up = self.upscale.forward(&img)?.gelu_erf()?;
        let up = up
            .reshape((b, g, g, p, p, ch))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, c.image_size * c.image_size, ch))?;
        let hyper = self.hyper.forward(&tokens.narrow(1, 0, 1)?)?; // (B, 1, ch)
        let logits = up.matmul(&hyper.transpose(1, 2)?.contiguous()?)?;
        Ok(logits.reshape((b, c.image_size, c.image_size))?)
    }
}
