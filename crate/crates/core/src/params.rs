//! Named parameter registry with per-array trainable flags, and the
//! checkpoint container built on top of it.
//!
//! # Checkpoint layout
//!
//! A checkpoint is a single safetensors file. Every parameter array is stored
//! under its dotted name (e.g. `encoder.blocks.0.attn.qkv.U`) as little-endian
//! f32. The safetensors header metadata carries:
//!
//! | key              | value                                              |
//! |------------------|----------------------------------------------------|
//! | `format_version` | decimal integer, currently `1`                     |
//! | `model_config`   | JSON object, see [`crate::model::ModelConfig`]     |
//! | `groups`         | JSON object mapping array name → parameter group   |
//! | `trainable`      | JSON array of the names flagged trainable          |
//! | `method`         | adaptation method label, absent for pretrained     |
//!
//! Adapter arrays use the suffixes `U`, `sigma`, `Vt`, `scale`, `shift` and
//! `bias`; LoRA arrays use `weight`, `bias`, `lora_x`, `lora_y`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const FORMAT_VERSION: u32 = 1;

/// Role of a parameter array; trainable sets are expressed in these terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    PatchEmbed,
    PosEmbed,
    LayerNorm,
    /// Dense weight of an adaptable encoder linear layer.
    EncoderWeight,
    /// Bias of an adaptable encoder linear layer.
    EncoderBias,
    /// Frozen `U`, `sigma`, `Vt` of a singular-value adapter.
    SvdFactor,
    SvdScale,
    SvdShift,
    LoraFactor,
    PromptEncoder,
    Decoder,
    Tal,
}

impl ParamGroup {
    pub fn label(self) -> &'static str {
        match self {
            ParamGroup::PatchEmbed => "patch_embed",
            ParamGroup::PosEmbed => "pos_embed",
            ParamGroup::LayerNorm => "layernorm",
            ParamGroup::EncoderWeight => "encoder_weight",
            ParamGroup::EncoderBias => "encoder_bias",
            ParamGroup::SvdFactor => "svd_factor",
            ParamGroup::SvdScale => "svd_scale",
            ParamGroup::SvdShift => "svd_shift",
            ParamGroup::LoraFactor => "lora_factor",
            ParamGroup::PromptEncoder => "prompt_encoder",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Tal => "tal",
        }
    }
}

#[derive(Debug, Clone)]
struct Param {
    value: Tensor,
    var: Option<Var>,
    group: ParamGroup,
}

impl Param {
    fn tensor(&self) -> Tensor {
        match &self.var {
            Some(v) => v.as_tensor().clone(),
            None => self.value.clone(),
        }
    }
}

/// Ordered map of named parameter arrays.
///
/// Frozen arrays are plain tensors and can never receive gradients; trainable
/// arrays are backed by a [`Var`]. Tensors handed out by [`ParamStore::get`]
/// share storage with the store, so optimizer updates are visible to any
/// model built from it.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    device: Device,
}

impl ParamStore {
    pub fn new(device: &Device) -> Self {
        Self {
            params: BTreeMap::new(),
            device: device.clone(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Insert (or replace) a frozen array.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) {
        self.params.insert(
            name.into(),
            Param {
                value: value.detach(),
                var: None,
                group,
            },
        );
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name).map(|p| p.tensor())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.params
            .get(name)
            .map(Param::tensor)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_opt(&self, name: &str) -> Option<Tensor> {
        self.params.get(name).map(Param::tensor)
    }

    pub fn group(&self, name: &str) -> Option<ParamGroup> {
        self.params.get(name).map(|p| p.group)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.var.is_some())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        match (trainable, p.var.take()) {
            (true, None) => {
                let var = Var::from_tensor(&p.value)?;
                p.value = var.as_tensor().detach();
                p.var = Some(var);
            }
            (false, Some(var)) => {
                p.value = var.as_tensor().copy()?.detach();
            }
            (_, keep) => p.var = keep,
        }
        Ok(())
    }

    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) -> Result<()> {
        let names: Vec<String> = self
            .params
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(n, _)| n.clone())
            .collect();
        for n in names {
            self.set_trainable(&n, trainable)?;
        }
        Ok(())
    }

    pub fn freeze_all(&mut self) -> Result<()> {
        let names: Vec<String> = self.params.keys().cloned().collect();
        for n in names {
            self.set_trainable(&n, false)?;
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// `(name, tensor, group, trainable)` in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Tensor, ParamGroup, bool)> {
        self.params
            .iter()
            .map(|(n, p)| (n.as_str(), p.tensor(), p.group, p.var.is_some()))
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params.values().filter_map(|p| p.var.clone()).collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.var.is_some())
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn total_count(&self) -> usize {
        self.params.values().map(|p| p.value.elem_count()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.var.is_some())
            .map(|p| p.value.elem_count())
            .sum()
    }

    /// Element counts per group, restricted to trainable arrays if asked.
    pub fn count_by_group(&self, trainable_only: bool) -> BTreeMap<ParamGroup, usize> {
        let mut out = BTreeMap::new();
        for p in self.params.values() {
            if !trainable_only || p.var.is_some() {
                *out.entry(p.group).or_insert(0) += p.value.elem_count();
            }
        }
        out
    }

    /// Bitwise snapshot of every array, as raw f32 bits.
    pub fn snapshot_bits(&self) -> Result<BTreeMap<String, Vec<u32>>> {
        self.params
            .iter()
            .map(|(n, p)| Ok((n.clone(), tensor_bits(&p.tensor())?)))
            .collect()
    }
}

pub fn tensor_bits(t: &Tensor) -> Result<Vec<u32>> {
    Ok(t
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?
        .into_iter()
        .map(f32::to_bits)
        .collect())
}

/// A parameter store plus the configuration needed to rebuild the model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub method: Option<String>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut groups = BTreeMap::new();
        let mut arrays = Vec::new();
        for (name, t, group, _) in self.store.iter() {
            groups.insert(name.to_string(), group);
            arrays.push((name.to_string(), t.to_dtype(DType::F32)?.contiguous()?));
        }
        let mut meta = HashMap::new();
        meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
        meta.insert("model_config".to_string(), json(&self.config)?);
        meta.insert("groups".to_string(), json(&groups)?);
        meta.insert("trainable".to_string(), json(&self.store.trainable_names())?);
        if let Some(m) = &self.method {
            meta.insert("method".to_string(), m.clone());
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        safetensors::serialize_to_file(arrays, Some(meta), path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| bad(&e.to_string()))?;
        let meta = header.metadata().clone().ok_or_else(|| bad("no metadata"))?;
        let field = |k: &str| meta.get(k).ok_or_else(|| bad(&format!("missing `{k}`")));
        let version: u32 = field("format_version")?
            .parse()
            .map_err(|_| bad("bad format_version"))?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let config: ModelConfig =
            serde_json::from_str(field("model_config")?).map_err(|e| bad(&e.to_string()))?;
        let groups: BTreeMap<String, ParamGroup> =
            serde_json::from_str(field("groups")?).map_err(|e| bad(&e.to_string()))?;
        let trainable: Vec<String> =
            serde_json::from_str(field("trainable")?).map_err(|e| bad(&e.to_string()))?;

        let tensors =
            safetensors::SafeTensors::deserialize(&bytes).map_err(|e| bad(&e.to_string()))?;
        let mut store = ParamStore::new(device);
        for (name, view) in tensors.tensors() {
            let group = *groups
                .get(&name)
                .ok_or_else(|| bad(&format!("no group for `{name}`")))?;
            store.insert(name, view.load(device)?, group);
        }
        for name in &trainable {
            store.set_trainable(name, true)?;
        }
        Ok(Self {
            config,
            store,
            method: meta.get("method").cloned(),
        })
    }
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trainable_toggle_preserves_values_and_shares_storage() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(&dev);
        store.insert("a", Tensor::new(&[1f32, 2., 3.], &dev).unwrap(), ParamGroup::LayerNorm);
        store.set_trainable("a", true).unwrap();
        let seen = store.get("a").unwrap();
        store.trainable_vars()[0]
            .set(&Tensor::new(&[4f32, 5., 6.], &dev).unwrap())
            .unwrap();
        assert_eq!(seen.to_vec1::<f32>().unwrap(), vec![4., 5., 6.]);
        store.set_trainable("a", false).unwrap();
        assert!(!store.is_trainable("a"));
        assert_eq!(store.get("a").unwrap().to_vec1::<f32>().unwrap(), vec![4., 5., 6.]);
        assert!(store.trainable_vars().is_empty());
    }

    #[test]
    fn counts_by_group() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(&dev);
        store.insert("w", Tensor::zeros((3, 4), DType::F32, &dev).unwrap(), ParamGroup::Decoder);
        store.insert("s", Tensor::zeros(5, DType::F32, &dev).unwrap(), ParamGroup::SvdScale);
        store.set_trainable("s", true).unwrap();
        assert_eq!(store.total_count(), 17);
        assert_eq!(store.trainable_count(), 5);
        assert_eq!(store.count_by_group(true).get(&ParamGroup::SvdScale), Some(&5));
        assert_eq!(store.count_by_group(true).get(&ParamGroup::Decoder), None);
    }
}
