//! Comparison methods and exact trainable-parameter accounting.
//!
//! Parameter totals count the base model once plus whatever the method adds:
//! singular-value tuning adds `2·min(D,K)` scale/shift entries per adapted
//! matrix (its `U`, `sigma`, `Vt` are a reparametrization of the dense
//! weight, counted as `D·K`), LoRA adds `r·(D+K)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::model::{
    adapt_for_ssam, adaptable_linears, init_params, resize_pos_embed, ModelConfig, SsamOptions,
};
use crate::params::{ParamGroup, ParamStore};
use crate::seed::substream;
use crate::text::TextAffineLayer;

pub const DEFAULT_LORA_RANK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Frozen,
    BiasOnly,
    Lora(usize),
    Svd,
    Full,
}

impl Method {
    pub fn is_svd(&self) -> bool {
        matches!(self, Method::Svd)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Frozen => f.write_str("frozen"),
            Method::BiasOnly => f.write_str("bias_only"),
            Method::Lora(r) => write!(f, "lora{r}"),
            Method::Svd => f.write_str("svd"),
            Method::Full => f.write_str("full"),
        }
    }
}

/// Accepts `frozen`, `bias_only`, `svd`, `full`, `lora` (default rank) and
/// `lora<r>` / `lora:<r>` / `lora(<r>)`.
impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let m = match t.as_str() {
            "frozen" => Method::Frozen,
            "bias_only" | "bias-only" => Method::BiasOnly,
            "svd" => Method::Svd,
            "full" => Method::Full,
            "lora" => Method::Lora(DEFAULT_LORA_RANK),
            _ => {
                let rank = t
                    .strip_prefix("lora")
                    .map(|r| r.trim_start_matches([':', '(']).trim_end_matches(')'))
                    .and_then(|r| r.parse::<usize>().ok())
                    .filter(|&r| r > 0)
                    .ok_or_else(|| Error::UnknownMethod(s.to_string()))?;
                Method::Lora(rank)
            }
        };
        Ok(m)
    }
}

impl TryFrom<String> for Method {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub method: String,
    pub total: usize,
    pub trainable: usize,
    pub fraction: f64,
    /// Trainable entries per parameter group label.
    pub breakdown: BTreeMap<String, usize>,
}

impl ParamReport {
    /// Enumerate a rewired store.
    pub fn from_store(method: &Method, store: &ParamStore) -> Self {
        let breakdown: BTreeMap<String, usize> = store
            .count_by_group(true)
            .into_iter()
            .map(|(g, n)| (g.label().to_string(), n))
            .collect();
        let trainable = store.trainable_count();
        let total = enumerated_total(store);
        Self {
            method: method.to_string(),
            total,
            trainable,
            fraction: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
            breakdown,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "method     {}\ntotal      {}\ntrainable  {}\nfraction   {:.6}\n",
            self.method, self.total, self.trainable, self.fraction
        );
        for (g, n) in &self.breakdown {
            s.push_str(&format!("  {g:<16} {n}\n"));
        }
        s
    }
}

/// Total parameters with each singular-value adapter counted as its dense
/// weight plus its scale/shift vectors.
fn enumerated_total(store: &ParamStore) -> usize {
    let mut total = 0;
    let mut dense: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (name, t, group, _) in store.iter() {
        if group != ParamGroup::SvdFactor {
            total += t.elem_count();
            continue;
        }
        if let Some(prefix) = name.strip_suffix(".U") {
            dense.entry(prefix.to_string()).or_default().0 = t.dims()[0];
        } else if let Some(prefix) = name.strip_suffix(".Vt") {
            dense.entry(prefix.to_string()).or_default().1 = t.dims()[1];
        }
    }
    total + dense.values().map(|(d, k)| d * k).sum::<usize>()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineOptions {
    pub target_image_size: usize,
    pub ssam: SsamOptions,
    /// Seeds the LoRA `Y` factors.
    pub seed: u64,
}

impl BaselineOptions {
    pub fn for_config(config: &ModelConfig) -> Self {
        Self {
            target_image_size: config.image_size,
            ssam: SsamOptions::default(),
            seed: 0,
        }
    }
}

/// Rewire a pretrained store for `method`. Every method except `full`
/// starts transparent: its initial predictions equal the pretrained ones.
pub fn make_baseline(
    pretrained: &ParamStore,
    config: &ModelConfig,
    method: &Method,
    opts: &BaselineOptions,
) -> Result<(ParamStore, ModelConfig)> {
    if method.is_svd() {
        return adapt_for_ssam(pretrained, config, opts.target_image_size, &opts.ssam);
    }
    let mut store = pretrained.clone();
    store.freeze_all()?;
    let config = resize_pos_embed(&mut store, config, opts.target_image_size)?;
    TextAffineLayer::ensure_in_store(&mut store, config.prompt_dim)?;
    match method {
        Method::Frozen | Method::Svd => {}
        Method::BiasOnly => {
            store.set_group_trainable(ParamGroup::EncoderBias, true)?;
            store.set_group_trainable(ParamGroup::Tal, true)?;
        }
        Method::Lora(rank) => {
            for prefix in adaptable_linears(&config, opts.ssam.adapt_attn_proj) {
                let w = store.get(&format!("{prefix}.weight"))?;
                let seed = substream(opts.seed, &prefix);
                let a = LoraAdapter::init(&w, None, *rank, seed)?;
                for (suffix, t) in [("lora_x", a.x()), ("lora_y", a.y())] {
                    let name = format!("{prefix}.{suffix}");
                    store.insert(name.clone(), t.clone(), ParamGroup::LoraFactor);
                    store.set_trainable(&name, true)?;
                }
            }
        }
        Method::Full => {
            let names: Vec<String> = store.names().map(str::to_string).collect();
            for n in names {
                store.set_trainable(&n, true)?;
            }
        }
    }
    Ok((store, config))
}

/// Shapes `(D, K)` of the adapted encoder matrices.
pub fn adapted_shapes(config: &ModelConfig, include_attn_proj: bool) -> Vec<(usize, usize)> {
    let (d, h) = (config.embed_dim, config.mlp_hidden);
    let mut out = Vec::new();
    for _ in 0..config.depth {
        out.push((3 * d, d));
        if include_attn_proj {
            out.push((d, d));
        }
        out.push((h, d));
        out.push((d, h));
    }
    out
}

/// Closed-form size of the pretrained model plus an affine text layer.
pub fn base_param_count(config: &ModelConfig) -> usize {
    let d = config.embed_dim;
    let lin = |o: usize, i: usize| o * i + o;
    let ln = 2 * d;
    let attn = 4 * lin(d, d);
    let g = config.grid();
    let block = 2 * ln + lin(3 * d, d) + lin(d, d) + lin(config.mlp_hidden, d) + lin(d, config.mlp_hidden);
    let encoder = lin(d, config.patch_features()) + g * g * d + config.depth * block + ln;
    let layer = 3 * attn
        + 4 * ln
        + lin(config.decoder_mlp_hidden, d)
        + lin(d, config.decoder_mlp_hidden);
    let p2c = config.patch_size * config.patch_size * config.upscale_channels;
    let decoder = d
        + config.decoder_depth * layer
        + attn
        + ln
        + lin(p2c, d)
        + lin(d, d)
        + lin(config.upscale_channels, d);
    let e = config.prompt_dim;
    encoder + lin(d, e) + decoder + lin(e, e)
}

/// Closed-form `(total, trainable)` for `method` on `config`.
pub fn formula_counts(method: &Method, config: &ModelConfig, ssam: &SsamOptions) -> (usize, usize) {
    let base = base_param_count(config);
    let shapes = adapted_shapes(config, ssam.adapt_attn_proj);
    let d = config.embed_dim;
    let e = config.prompt_dim;
    let tal = e * e + e;
    match method {
        Method::Frozen => (base, 0),
        Method::Full => (base, base),
        Method::BiasOnly => {
            let biases = config.depth * (3 * d + d + config.mlp_hidden + d);
            (base, biases + tal)
        }
        Method::Lora(r) => {
            let added: usize = shapes.iter().map(|(o, i)| r * (o + i)).sum();
            (base + added, added)
        }
        Method::Svd => {
            let per: usize = shapes.iter().map(|(o, i)| (*o).min(*i)).sum();
            let t = &ssam.toggles;
            let g = config.grid();
            let mut trainable = 0;
            if t.scale {
                trainable += per;
            }
            if t.shift {
                trainable += per;
            }
            if t.layernorm {
                trainable += (2 * config.depth + 1) * 2 * d;
            }
            if t.pos_embed {
                trainable += g * g * d;
            }
            if t.tal {
                trainable += tal;
            }
            if ssam.train_adapter_bias {
                trainable += shapes.iter().map(|(o, _)| o).sum::<usize>();
            }
            (base + 2 * per, trainable)
        }
    }
}

/// Parameter report for `method` on `config`, computed both in closed form
/// and by enumerating a constructed model; the two must agree exactly.
pub fn count_trainable(method: &Method, config: &ModelConfig) -> Result<ParamReport> {
    count_trainable_with(method, config, &SsamOptions::default())
}

pub fn count_trainable_with(
    method: &Method,
    config: &ModelConfig,
    ssam: &SsamOptions,
) -> Result<ParamReport> {
    let store = init_params(config, 0, &Device::Cpu)?;
    let opts = BaselineOptions {
        target_image_size: config.image_size,
        ssam: *ssam,
        seed: 0,
    };
    let (rewired, _) = make_baseline(&store, config, method, &opts)?;
    let report = ParamReport::from_store(method, &rewired);
    let (total, trainable) = formula_counts(method, config, ssam);
    if (total, trainable) != (report.total, report.trainable) {
        return Err(Error::Accounting(format!(
            "{method}: formula gives {trainable}/{total}, enumeration gives {}/{}",
            report.trainable, report.total
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_roundtrip() {
        for m in [Method::Frozen, Method::BiasOnly, Method::Lora(4), Method::Svd, Method::Full] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert_eq!("lora(8)".parse::<Method>().unwrap(), Method::Lora(8));
        assert_eq!("lora:2".parse::<Method>().unwrap(), Method::Lora(2));
        assert!(matches!("adapter".parse::<Method>(), Err(Error::UnknownMethod(_))));
        assert!("lora0".parse::<Method>().is_err());
    }

    #[test]
    fn report_text_lists_groups() {
        let r = count_trainable(&Method::Svd, &ModelConfig::desk()).unwrap();
        let text = r.to_text();
        assert!(text.contains("svd_shift"));
        assert!(text.contains("pos_embed"));
    }
}
