use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::encoder::POS_EMBED;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::svd_adapter::SvdAdapter;
use crate::text::TextAffineLayer;

/// Which trainable components singular-value tuning unfreezes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComponentToggles {
    pub pos_embed: bool,
    pub layernorm: bool,
    pub tal: bool,
    pub scale: bool,
    pub shift: bool,
}

impl Default for ComponentToggles {
    fn default() -> Self {
        Self::all()
    }
}

impl ComponentToggles {
    pub const fn all() -> Self {
        Self {
            pos_embed: true,
            layernorm: true,
            tal: true,
            scale: true,
            shift: true,
        }
    }

    pub const fn none() -> Self {
        Self {
            pos_embed: false,
            layernorm: false,
            tal: false,
            scale: false,
            shift: false,
        }
    }

    pub fn any(&self) -> bool {
        self.pos_embed || self.layernorm || self.tal || self.scale || self.shift
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsamOptions {
    pub toggles: ComponentToggles,
    /// Also adapt the attention output projection, not only qkv and the MLP.
    pub adapt_attn_proj: bool,
    /// Unfreeze the biases of adapted layers.
    pub train_adapter_bias: bool,
}

impl Default for SsamOptions {
    fn default() -> Self {
        Self {
            toggles: ComponentToggles::all(),
            adapt_attn_proj: true,
            train_adapter_bias: false,
        }
    }
}

/// Prefixes of the encoder linear layers that adapters attach to.
pub fn adaptable_linears(config: &ModelConfig, include_attn_proj: bool) -> Vec<String> {
    let mut out = Vec::new();
    for n in 0..config.depth {
        let p = format!("encoder.blocks.{n}");
        out.push(format!("{p}.attn.qkv"));
        if include_attn_proj {
            out.push(format!("{p}.attn.proj"));
        }
        out.push(format!("{p}.mlp.fc1"));
        out.push(format!("{p}.mlp.fc2"));
    }
    out
}

/// Non-overlapping average pooling of a `(G, G, D)` grid down to
/// `(target, target, D)`. The source side must be an integer multiple of the
/// target side.
pub fn avg_pool_grid(grid: &Tensor, target: usize) -> Result<Tensor> {
    let (g, g2, d) = grid.dims3()?;
    if g != g2 {
        return Err(Error::Shape(format!("grid must be square, got {g}x{g2}")));
    }
    if target == 0 || target > g || g % target != 0 {
        return Err(Error::PoolingRatio { src: g, tgt: target });
    }
    let w = g / target;
    let src = grid.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut out = vec![0.0f64; target * target * d];
    for ty in 0..target {
        for tx in 0..target {
            for c in 0..d {
                let mut acc = 0.0;
                for dy in 0..w {
                    for dx in 0..w {
                        acc += src[((ty * w + dy) * g + tx * w + dx) * d + c];
                    }
                }
                out[(ty * target + tx) * d + c] = acc / (w * w) as f64;
            }
        }
    }
    Ok(Tensor::from_vec(out, (target, target, d), grid.device())?.to_dtype(grid.dtype())?)
}

/// Rewire a pretrained parameter store for singular-value tuning.
///
/// Every adaptable encoder weight is replaced by frozen `U`, `sigma`, `Vt`
/// plus identity-initialized `scale`/`shift`; the positional embedding is
/// average-pooled to the grid of `target_image_size`; an identity TAL is
/// added. Only the components enabled in `options.toggles` are trainable.
pub fn adapt_for_ssam(
    pretrained: &ParamStore,
    config: &ModelConfig,
    target_image_size: usize,
    options: &SsamOptions,
) -> Result<(ParamStore, ModelConfig)> {
    let mut store = pretrained.clone();
    store.freeze_all()?;
    let config = resize_pos_embed(&mut store, config, target_image_size)?;

    let linears = adaptable_linears(&config, options.adapt_attn_proj);
    for prefix in &linears {
        let w = store
            .remove(&format!("{prefix}.weight"))
            .ok_or_else(|| Error::Checkpoint(format!("`{prefix}` has no dense weight to adapt")))?;
        let a = SvdAdapter::decompose_named(prefix, &w, None)?;
        store.insert(format!("{prefix}.U"), a.u().clone(), ParamGroup::SvdFactor);
        store.insert(format!("{prefix}.sigma"), a.sigma().clone(), ParamGroup::SvdFactor);
        store.insert(format!("{prefix}.Vt"), a.vt().clone(), ParamGroup::SvdFactor);
        store.insert(format!("{prefix}.scale"), a.scale().clone(), ParamGroup::SvdScale);
        store.insert(format!("{prefix}.shift"), a.shift().clone(), ParamGroup::SvdShift);
    }
    TextAffineLayer::ensure_in_store(&mut store, config.prompt_dim)?;

    let t = &options.toggles;
    store.set_group_trainable(ParamGroup::SvdScale, t.scale)?;
    store.set_group_trainable(ParamGroup::SvdShift, t.shift)?;
    store.set_group_trainable(ParamGroup::LayerNorm, t.layernorm)?;
    store.set_group_trainable(ParamGroup::PosEmbed, t.pos_embed)?;
    store.set_group_trainable(ParamGroup::Tal, t.tal)?;
    if options.train_adapter_bias {
        for prefix in &linears {
            store.set_trainable(&format!("{prefix}.bias"), true)?;
        }
    }

    Ok((store, config))
}

/// Average-pool the stored positional embedding to the grid of
/// `target_image_size` and return the matching config. The group and
/// trainable flag of the array are preserved.
pub fn resize_pos_embed(
    store: &mut ParamStore,
    config: &ModelConfig,
    target_image_size: usize,
) -> Result<ModelConfig> {
    if target_image_size % config.patch_size != 0 {
        return Err(Error::Config(format!(
            "target image size {target_image_size} is not divisible by patch size {}",
            config.patch_size
        )));
    }
    let trainable = store.is_trainable(POS_EMBED);
    let pooled = avg_pool_grid(&store.get(POS_EMBED)?, target_image_size / config.patch_size)?;
    store.insert(POS_EMBED, pooled, ParamGroup::PosEmbed);
    store.set_trainable(POS_EMBED, trainable)?;
    Ok(ModelConfig {
        image_size: target_image_size,
        ..config.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn pools_four_by_four_into_block_means() {
        let data: Vec<f64> = (1..=16).map(f64::from).collect();
        let grid = Tensor::from_vec(data, (4, 4, 1), &Device::Cpu).unwrap();
        let pooled = avg_pool_grid(&grid, 2).unwrap().squeeze(2).unwrap();
        assert_eq!(pooled.to_vec2::<f64>().unwrap(), vec![vec![3.5, 5.5], vec![11.5, 13.5]]);
    }

    #[test]
    fn same_size_pooling_is_bitwise_identity() {
        let grid = Tensor::randn(0f32, 1.0, (8, 8, 3), &Device::Cpu).unwrap();
        let pooled = avg_pool_grid(&grid, 8).unwrap();
        assert_eq!(
            pooled.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            grid.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn non_integer_ratio_is_rejected() {
        let grid = Tensor::zeros((8, 8, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(avg_pool_grid(&grid, 3), Err(Error::PoolingRatio { src: 8, tgt: 3 })));
        assert!(matches!(avg_pool_grid(&grid, 16), Err(Error::PoolingRatio { .. })));
    }

    #[test]
    fn adaptable_set_respects_projection_flag() {
        let cfg = ModelConfig::toy();
        assert_eq!(adaptable_linears(&cfg, true).len(), 16);
        let literal = adaptable_linears(&cfg, false);
        assert_eq!(literal.len(), 12);
        assert!(literal.iter().all(|p| !p.ends_with("attn.proj")));
    }
}
