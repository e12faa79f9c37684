//! Low-rank adaptation baseline: `W' = W + X·Y` with `X: D×r`, `Y: r×K`.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    weight: Tensor,
    bias: Option<Tensor>,
    x: Tensor,
    y: Tensor,
}

impl LoraAdapter {
    /// `X = 0`, `Y ~ N(0, 1/K)`, so the adapter starts transparent.
    pub fn init(weight: &Tensor, bias: Option<&Tensor>, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        let (d, k) = weight.dims2()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, (1.0 / k as f32).sqrt()).expect("valid std");
        let y: Vec<f32> = (0..rank * k).map(|_| normal.sample(&mut rng)).collect();
        let y = Tensor::from_vec(y, (rank, k), weight.device())?.to_dtype(weight.dtype())?;
        let x = Tensor::zeros((d, rank), weight.dtype(), weight.device())?;
        Self::from_parts(weight.clone(), bias.cloned(), x, y)
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>, x: Tensor, y: Tensor) -> Result<Self> {
        let (d, k) = weight.dims2()?;
        let (xd, r) = x.dims2()?;
        let (yr, yk) = y.dims2()?;
        if xd != d || yk != k || yr != r {
            return Err(Error::Shape(format!(
                "LoRA factors X {xd}x{r}, Y {yr}x{yk} do not fit W {d}x{k}"
            )));
        }
        if let Some(b) = &bias {
            if b.dims() != [d] {
                return Err(Error::Shape(format!("bias shape {:?}, expected [{d}]", b.dims())));
            }
        }
        Ok(Self { weight, bias, x, y })
    }

    pub fn rank(&self) -> usize {
        self.x.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn y(&self) -> &Tensor {
        &self.y
    }

    pub fn device(&self) -> &Device {
        self.weight.device()
    }

    pub fn dtype(&self) -> DType {
        self.weight.dtype()
    }

    /// `(W + XY)·x + b` for `x` of shape `(..., K)`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let dims = input.dims().to_vec();
        let k = self.in_dim();
        if dims.last() != Some(&k) {
            return Err(Error::Shape(format!(
                "LoRA layer expects trailing dim {k}, got input shape {dims:?}"
            )));
        }
        let rows = input.elem_count() / k;
        let flat = input.reshape((rows, k))?;
        let base = flat.matmul(&self.weight.t()?)?;
        let delta = flat.matmul(&self.y.t()?)?.matmul(&self.x.t()?)?;
        let mut out = (base + delta)?;
        if let Some(b) = &self.bias {
            out = out.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(out.reshape(out_dims)?)
    }

    pub fn merge(&self) -> Result<(Tensor, Option<Tensor>)> {
        let w = (&self.weight + self.x.matmul(&self.y)?)?.detach();
        Ok((w, self.bias.as_ref().map(|b| b.detach())))
    }

    /// `r·(D + K)`.
    pub fn trainable_count(&self) -> usize {
        self.rank() * (self.out_dim() + self.in_dim())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_init_is_exactly_the_base_layer() {
        let dev = Device::Cpu;
        let w = Tensor::new(&[[1f64, 2.], [3., 4.], [5., 6.]], &dev).unwrap();
        let b = Tensor::new(&[0.5f64, -0.5, 1.0], &dev).unwrap();
        let lora = LoraAdapter::init(&w, Some(&b), 2, 0).unwrap();
        let x = Tensor::new(&[[1f64, -1.], [0.25, 2.]], &dev).unwrap();
        let want = x.matmul(&w.t().unwrap()).unwrap().broadcast_add(&b).unwrap();
        assert_eq!(
            lora.forward(&x).unwrap().to_vec2::<f64>().unwrap(),
            want.to_vec2::<f64>().unwrap()
        );
        assert_eq!(lora.trainable_count(), 2 * (3 + 2));
    }

    #[test]
    fn full_rank_delta_matches_dense_update() {
        let dev = Device::Cpu;
        let w = Tensor::new(&[[1f64, 0.], [0., 1.]], &dev).unwrap();
        let x = Tensor::new(&[[2f64, 0.], [1., 1.]], &dev).unwrap();
        let y = Tensor::new(&[[0.5f64, 0.], [0., -1.]], &dev).unwrap();
        let lora = LoraAdapter::from_parts(w.clone(), None, x.clone(), y.clone()).unwrap();
        let input = Tensor::new(&[[3f64, 4.]], &dev).unwrap();
        let dense = (w + x.matmul(&y).unwrap()).unwrap();
        let want = input.matmul(&dense.t().unwrap()).unwrap();
        assert_eq!(
            lora.forward(&input).unwrap().to_vec2::<f64>().unwrap(),
            want.to_vec2::<f64>().unwrap()
        );
    }

    #[test]
    fn rank_zero_is_a_config_error() {
        let w = Tensor::zeros((2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(LoraAdapter::init(&w, None, 0, 0), Err(Error::Config(_))));
    }
}
