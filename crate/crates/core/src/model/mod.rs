//! Desk-scale promptable segmentation model: a ViT image encoder with
//! adaptable linear layers, a frozen prompt encoder fed by the text affine
//! layer, and a frozen two-way attention mask decoder.

mod adapt;
mod config;
mod decoder;
mod encoder;

pub use adapt::{
    adapt_for_ssam, adaptable_linears, avg_pool_grid, resize_pos_embed, ComponentToggles,
    SsamOptions,
};
pub use config::{ModelConfig, TalActivation};
pub use decoder::MaskDecoder;
pub use encoder::{EncoderBlock, ImageEncoder};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamGroup, ParamStore};
use crate::text::TextAffineLayer;

pub const PROMPT_ENCODER: &str = "prompt_encoder.proj";

/// The assembled model. Cheap to rebuild from a [`ParamStore`]; all tensors
/// share storage with the store.
#[derive(Debug, Clone)]
pub struct PromptSegModel {
    config: ModelConfig,
    encoder: ImageEncoder,
    prompt_encoder: Linear,
    tal: Option<TextAffineLayer>,
    decoder: MaskDecoder,
}

impl PromptSegModel {
    pub fn from_store(store: &ParamStore, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            encoder: ImageEncoder::load(store, config)?,
            prompt_encoder: Linear::load(store, PROMPT_ENCODER)?,
            tal: TextAffineLayer::load(store, config.tal_activation)?,
            decoder: MaskDecoder::load(store, config)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tal(&self) -> Option<&TextAffineLayer> {
        self.tal.as_ref()
    }

    /// A copy of this model with the TAL removed (prompt embeddings go
    /// straight to the prompt encoder).
    pub fn without_tal(&self) -> Self {
        Self {
            tal: None,
            ..self.clone()
        }
    }

    pub fn encoder(&self) -> &ImageEncoder {
        &self.encoder
    }

    /// `images: (B, H, W, C)` → image embedding grid `(B, G, G, D)`.
    pub fn encode_image(&self, images: &Tensor) -> Result<Tensor> {
        let tokens = self.encoder.forward(images)?;
        let (b, _, d) = tokens.dims3()?;
        let g = self.config.grid();
        Ok(tokens.reshape((b, g, g, d))?)
    }

    /// Prompt embeddings `(B, E)` → decoder prompt tokens `(B, 1, D)`.
    pub fn encode_prompt(&self, prompts: &Tensor) -> Result<Tensor> {
        let e = match &self.tal {
            Some(tal) => tal.forward(prompts)?,
            None => prompts.clone(),
        };
        Ok(self.prompt_encoder.forward(&e)?.unsqueeze(1)?)
    }

    /// Mask logits `(B, H, W)`; foreground where the logit is positive.
    pub fn predict_mask(&self, images: &Tensor, prompts: &Tensor) -> Result<Tensor> {
        let (b, e) = prompts.dims2()?;
        if b != images.dims()[0] || e != self.config.prompt_dim {
            return Err(Error::Shape(format!(
                "prompt batch {:?} does not match images {:?} / prompt_dim {}",
                prompts.dims(),
                images.dims(),
                self.config.prompt_dim
            )));
        }
        let tokens = self.encoder.forward(images)?;
        let prompt_tokens = self.encode_prompt(prompts)?;
        self.decoder.forward(&tokens, &prompt_tokens)
    }
}

fn normal(rng: &mut ChaCha8Rng, std: f32, n: usize) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("valid std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    device: Device,
}

impl Init<'_> {
    fn linear(&mut self, prefix: &str, out: usize, inp: usize, wg: ParamGroup, bg: ParamGroup) -> Result<()> {
        let std = (2.0 / (inp + out) as f32).sqrt();
        let w = Tensor::from_vec(normal(&mut self.rng, std, out * inp), (out, inp), &self.device)?;
        self.store.insert(format!("{prefix}.weight"), w, wg);
        self.store
            .insert(format!("{prefix}.bias"), Tensor::zeros(out, DType::F32, &self.device)?, bg);
        Ok(())
    }

    fn layer_norm(&mut self, prefix: &str, dim: usize, group: ParamGroup) -> Result<()> {
        self.store
            .insert(format!("{prefix}.weight"), Tensor::ones(dim, DType::F32, &self.device)?, group);
        self.store
            .insert(format!("{prefix}.bias"), Tensor::zeros(dim, DType::F32, &self.device)?, group);
        Ok(())
    }

    fn attention(&mut self, prefix: &str, dim: usize) -> Result<()> {
        for p in ["q", "k", "v", "out"] {
            self.linear(&format!("{prefix}.{p}"), dim, dim, ParamGroup::Decoder, ParamGroup::Decoder)?;
        }
        Ok(())
    }
}

/// Randomly initialized parameters for `config`; identical for identical
/// `(config, seed)`. No TAL is created: pretrained models feed text
/// embeddings straight into the prompt encoder.
pub fn init_params(config: &ModelConfig, seed: u64, device: &Device) -> Result<ParamStore> {
    config.validate()?;
    let mut store = ParamStore::new(device);
    let mut init = Init {
        store: &mut store,
        rng: ChaCha8Rng::seed_from_u64(seed),
        device: device.clone(),
    };
    let d = config.embed_dim;
    let g = config.grid();

    init.linear(
        encoder::PATCH_EMBED,
        d,
        config.patch_features(),
        ParamGroup::PatchEmbed,
        ParamGroup::PatchEmbed,
    )?;
    let pos = Tensor::from_vec(normal(&mut init.rng, 0.02, g * g * d), (g, g, d), device)?;
    init.store.insert(encoder::POS_EMBED, pos, ParamGroup::PosEmbed);
    for n in 0..config.depth {
        let p = format!("encoder.blocks.{n}");
        let (w, b) = (ParamGroup::EncoderWeight, ParamGroup::EncoderBias);
        init.layer_norm(&format!("{p}.norm1"), d, ParamGroup::LayerNorm)?;
        init.linear(&format!("{p}.attn.qkv"), 3 * d, d, w, b)?;
        init.linear(&format!("{p}.attn.proj"), d, d, w, b)?;
        init.layer_norm(&format!("{p}.norm2"), d, ParamGroup::LayerNorm)?;
        init.linear(&format!("{p}.mlp.fc1"), config.mlp_hidden, d, w, b)?;
        init.linear(&format!("{p}.mlp.fc2"), d, config.mlp_hidden, w, b)?;
    }
    init.layer_norm(encoder::FINAL_NORM, d, ParamGroup::LayerNorm)?;

    init.linear(PROMPT_ENCODER, d, config.prompt_dim, ParamGroup::PromptEncoder, ParamGroup::PromptEncoder)?;

    let dec = ParamGroup::Decoder;
    let tok = Tensor::from_vec(normal(&mut init.rng, 1.0, d), (1, 1, d), device)?;
    init.store.insert(decoder::MASK_TOKEN, tok, dec);
    for l in 0..config.decoder_depth {
        let p = format!("decoder.layers.{l}");
        init.attention(&format!("{p}.self_attn"), d)?;
        init.layer_norm(&format!("{p}.norm1"), d, dec)?;
        init.attention(&format!("{p}.cross_token_to_image"), d)?;
        init.layer_norm(&format!("{p}.norm2"), d, dec)?;
        init.linear(&format!("{p}.mlp.fc1"), config.decoder_mlp_hidden, d, dec, dec)?;
        init.linear(&format!("{p}.mlp.fc2"), d, config.decoder_mlp_hidden, dec, dec)?;
        init.layer_norm(&format!("{p}.norm3"), d, dec)?;
        init.attention(&format!("{p}.cross_image_to_token"), d)?;
        init.layer_norm(&format!("{p}.norm4"), d, dec)?;
    }
    init.attention("decoder.final_attn", d)?;
    init.layer_norm("decoder.final_norm", d, dec)?;
    let up = config.patch_size * config.patch_size * config.upscale_channels;
    init.linear("decoder.upscale", up, d, dec, dec)?;
    init.linear("decoder.hyper.fc1", d, d, dec, dec)?;
    init.linear("decoder.hyper.fc2", config.upscale_channels, d, dec, dec)?;
    Ok(store)
}

/// Initialize a model for `config`. With `trainable = true` every array is
/// trainable (pretraining); otherwise everything is frozen.
pub fn build_pretrained(
    config: &ModelConfig,
    seed: u64,
    trainable: bool,
    device: &Device,
) -> Result<(ParamStore, PromptSegModel)> {
    let mut store = init_params(config, seed, device)?;
    if trainable {
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for n in names {
            store.set_trainable(&n, true)?;
        }
    }
    let model = PromptSegModel::from_store(&store, config)?;
    Ok((store, model))
}
