//! Differentiable building blocks composed from candle primitives so that
//! every op has a backward pass.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::params::ParamStore;
use crate::svd_adapter::SvdAdapter;

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn load(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: store.get(&format!("{prefix}.weight"))?,
            bias: store.get(&format!("{prefix}.bias"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LAYER_NORM_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// A linear map `y = W x + b` in one of its three parameterizations.
#[derive(Debug, Clone)]
pub enum Linear {
    Dense { weight: Tensor, bias: Option<Tensor> },
    Svd(SvdAdapter),
    Lora(LoraAdapter),
}

impl Linear {
    /// Build from whatever arrays the store holds under `prefix`: LoRA factors
    /// take precedence, then SVD factors, then a plain weight.
    pub fn load(store: &ParamStore, prefix: &str) -> Result<Self> {
        let bias = store.get_opt(&format!("{prefix}.bias"));
        if store.contains(&format!("{prefix}.lora_x")) {
            return Ok(Linear::Lora(LoraAdapter::from_parts(
                store.get(&format!("{prefix}.weight"))?,
                bias,
                store.get(&format!("{prefix}.lora_x"))?,
                store.get(&format!("{prefix}.lora_y"))?,
            )?));
        }
        if store.contains(&format!("{prefix}.U")) {
            return Ok(Linear::Svd(SvdAdapter::from_parts(
                store.get(&format!("{prefix}.U"))?,
                store.get(&format!("{prefix}.sigma"))?,
                store.get(&format!("{prefix}.Vt"))?,
                store.get(&format!("{prefix}.scale"))?,
                store.get(&format!("{prefix}.shift"))?,
                bias,
            )?));
        }
        Ok(Linear::Dense {
            weight: store.get(&format!("{prefix}.weight"))?,
            bias,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Linear::Dense { weight, bias } => {
                let (out, k) = weight.dims2()?;
                let dims = x.dims().to_vec();
                if dims.last() != Some(&k) {
                    return Err(Error::Shape(format!(
                        "linear expects trailing dim {k}, got {dims:?}"
                    )));
                }
                let flat = x.reshape((x.elem_count() / k, k))?;
                let mut y = flat.matmul(&weight.t()?)?;
                if let Some(b) = bias {
                    y = y.broadcast_add(b)?;
                }
                let mut out_dims = dims;
                *out_dims.last_mut().unwrap() = out;
                Ok(y.reshape(out_dims)?)
            }
            Linear::Svd(a) => a.forward(x),
            Linear::Lora(a) => a.forward(x),
        }
    }
}

/// Multi-head scaled dot-product attention over already-projected inputs.
/// `q: (B, Tq, D)`, `k, v: (B, Tk, D)` → `(B, Tq, D)`.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, tq, d) = q.dims3()?;
    let tk = k.dims()[1];
    let dh = d / heads;
    let split = |t: &Tensor, len: usize| -> Result<Tensor> {
        Ok(t.reshape((b, len, heads, dh))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * heads, len, dh))?)
    };
    let (qh, kh, vh) = (split(q, tq)?, split(k, tk)?, split(v, tk)?);
    let scores = (qh.matmul(&kh.transpose(1, 2)?.contiguous()?)? / (dh as f64).sqrt())?;
    let attn = softmax_last(&scores)?;
    let out = attn.matmul(&vh)?;
    Ok(out
        .reshape((b, heads, tq, dh))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, tq, d))?)
}

/// Attention with separate q/k/v/out projections, as used in the decoder.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    pub fn load(store: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::load(store, &format!("{prefix}.q"))?,
            k: Linear::load(store, &format!("{prefix}.k"))?,
            v: Linear::load(store, &format!("{prefix}.v"))?,
            out: Linear::load(store, &format!("{prefix}.out"))?,
            heads,
        })
    }

    pub fn forward(&self, q: &Tensor, kv: &Tensor) -> Result<Tensor> {
        let o = multi_head_attention(
            &self.q.forward(q)?,
            &self.k.forward(kv)?,
            &self.v.forward(kv)?,
            self.heads,
        )?;
        self.out.forward(&o)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn load(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            fc1: Linear::load(store, &format!("{prefix}.fc1"))?,
            fc2: Linear::load(store, &format!("{prefix}.fc2"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1f32, 2., 3.], [-1., 0., 100.]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_standardizes() {
        let dev = Device::Cpu;
        let ln = LayerNorm {
            weight: Tensor::ones(4, DType::F64, &dev).unwrap(),
            bias: Tensor::zeros(4, DType::F64, &dev).unwrap(),
        };
        let x = Tensor::new(&[[1f64, 2., 3., 4.]], &dev).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap()[0].clone();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn uniform_attention_returns_value_mean() {
        let dev = Device::Cpu;
        let q = Tensor::zeros((1, 2, 4), DType::F64, &dev).unwrap();
        let k = Tensor::zeros((1, 3, 4), DType::F64, &dev).unwrap();
        let v = Tensor::new(&[[[1f64, 2., 3., 4.], [3., 2., 1., 0.], [2., 2., 2., 2.]]], &dev).unwrap();
        let o = multi_head_attention(&q, &k, &v, 2).unwrap().to_vec3::<f64>().unwrap();
        for row in &o[0] {
            for (a, b) in row.iter().zip([2.0, 2.0, 2.0, 2.0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
