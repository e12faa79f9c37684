//! Singular-value tuning of a single linear layer.
//!
//! A weight `W` (`D×K`, output × input) is factored once as `U Σ Vᵀ` and the
//! factors are frozen. Two length-`R` vectors, `scale` and `shift`, re-weight
//! the spectrum:
//!
//! ```text
//! W' = U · diag(ReLU(scale ⊙ σ + shift)) · Vᵀ
//! ```
//!
//! With `scale = 1` and `shift = 0` the layer reproduces `W`. The ReLU keeps
//! every effective singular value non-negative, so no projection step is ever
//! needed after an optimizer update.

use candle_core::{DType, Device, Tensor};
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;

/// Frozen spectral factors of one weight matrix plus its trainable
/// scale/shift vectors.
#[derive(Debug, Clone)]
pub struct SvdAdapter {
    u: Tensor,
    sigma: Tensor,
    vt: Tensor,
    scale: Tensor,
    shift: Tensor,
    bias: Option<Tensor>,
    // contiguous transposes used by `forward`
    u_t: Tensor,
    vt_t: Tensor,
}

/// ReLU whose subgradient at exactly zero is zero.
///
/// candle's built-in `relu` propagates gradient 1 at the kink; clamped
/// singular values must not receive gradient there.
pub fn relu_zero_kink(x: &Tensor) -> Result<Tensor> {
    let mask = x.gt(0.0)?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

impl SvdAdapter {
    pub fn decompose(w: &Tensor, bias: Option<&Tensor>) -> Result<Self> {
        Self::decompose_named("weight", w, bias)
    }

    /// Factor `w` in double precision and return an identity-initialized
    /// adapter whose factors live in `w`'s dtype. `name` identifies the
    /// matrix in error messages.
    pub fn decompose_named(name: &str, w: &Tensor, bias: Option<&Tensor>) -> Result<Self> {
        let (d, k) = w.dims2().map_err(|_| {
            Error::Shape(format!("`{name}` must be a matrix, got shape {:?}", w.dims()))
        })?;
        if d == 0 || k == 0 {
            return Err(Error::Shape(format!("`{name}` has an empty dimension")));
        }
        let svd = linalg::thin_svd(name, &linalg::to_dmatrix(w)?)?;
        let dtype = w.dtype();
        let device = w.device();
        let rank = d.min(k);
        Self::from_parts(
            linalg::from_dmatrix(&svd.u, dtype, device)?,
            linalg::from_dvector(&svd.sigma, dtype, device)?,
            linalg::from_dmatrix(&svd.vt, dtype, device)?,
            Tensor::ones(rank, dtype, device)?,
            Tensor::zeros(rank, dtype, device)?,
            bias.cloned(),
        )
    }

    /// Assemble an adapter from stored parts (e.g. a checkpoint). `scale` and
    /// `shift` may be variable-backed tensors.
    pub fn from_parts(
        u: Tensor,
        sigma: Tensor,
        vt: Tensor,
        scale: Tensor,
        shift: Tensor,
        bias: Option<Tensor>,
    ) -> Result<Self> {
        let (d, r) = u.dims2()?;
        let (r2, k) = vt.dims2()?;
        if r != r2 || r != d.min(k) {
            return Err(Error::Shape(format!(
                "factor shapes U {d}x{r}, Vt {r2}x{k} are not a thin SVD"
            )));
        }
        for (what, t) in [("sigma", &sigma), ("scale", &scale), ("shift", &shift)] {
            if t.dims() != [r] {
                return Err(Error::Shape(format!(
                    "{what} has shape {:?}, expected [{r}]",
                    t.dims()
                )));
            }
        }
        if let Some(b) = &bias {
            if b.dims() != [d] {
                return Err(Error::Shape(format!(
                    "bias has shape {:?}, expected [{d}]",
                    b.dims()
                )));
            }
        }
        let s = sigma.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if s.iter().any(|&v| v < 0.0) || s.windows(2).any(|p| p[0] < p[1]) {
            return Err(Error::Shape(
                "sigma must be non-negative and sorted non-increasing".into(),
            ));
        }
        let u_t = u.t()?.contiguous()?;
        let vt_t = vt.t()?.contiguous()?;
        Ok(Self {
            u,
            sigma,
            vt,
            scale,
            shift,
            bias,
            u_t,
            vt_t,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.u.dims()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.vt.dims()[1]
    }

    pub fn rank(&self) -> usize {
        self.sigma.dims()[0]
    }

    pub fn u(&self) -> &Tensor {
        &self.u
    }

    pub fn sigma(&self) -> &Tensor {
        &self.sigma
    }

    pub fn vt(&self) -> &Tensor {
        &self.vt
    }

    pub fn scale(&self) -> &Tensor {
        &self.scale
    }

    pub fn shift(&self) -> &Tensor {
        &self.shift
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn device(&self) -> &Device {
        self.u.device()
    }

    /// Replace the trainable vectors, keeping the frozen factors.
    pub fn with_scale_shift(&self, scale: Tensor, shift: Tensor) -> Result<Self> {
        Self::from_parts(
            self.u.clone(),
            self.sigma.clone(),
            self.vt.clone(),
            scale,
            shift,
            self.bias.clone(),
        )
    }

    /// `ReLU(scale ⊙ σ + shift)`.
    pub fn effective_sigma(&self) -> Result<Tensor> {
        let pre = self.scale.mul(&self.sigma)?.add(&self.shift)?;
        relu_zero_kink(&pre)
    }

    pub fn effective_weight(&self) -> Result<Tensor> {
        let s = self.effective_sigma()?;
        Ok(self.u.broadcast_mul(&s.unsqueeze(0)?)?.matmul(&self.vt)?)
    }

    /// `W'·x + b` for `x` of shape `(..., K)`, computed as `U(diag(σ')(Vᵀx))`
    /// without forming `W'`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let k = self.in_dim();
        if dims.last() != Some(&k) {
            return Err(Error::Shape(format!(
                "adapter expects trailing dim {k}, got input shape {dims:?}"
            )));
        }
        let rows = x.elem_count() / k;
        let flat = x.reshape((rows, k))?;
        let s = self.effective_sigma()?;
        let h = flat.matmul(&self.vt_t)?.broadcast_mul(&s)?;
        let mut y = h.matmul(&self.u_t)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }

    /// Fold the adapter into a plain dense weight for inference.
    pub fn merge(&self) -> Result<(Tensor, Option<Tensor>)> {
        Ok((self.effective_weight()?.detach(), self.bias.as_ref().map(|b| b.detach())))
    }

    /// Number of trainable scalars: `2·min(D, K)`.
    pub fn trainable_count(&self) -> usize {
        2 * self.rank()
    }

    /// `U diag(σ) Vᵀ` in double precision, for reconstruction checks.
    pub fn reconstruct_f64(&self) -> Result<DMatrix<f64>> {
        let u = linalg::to_dmatrix(&self.u)?;
        let vt = linalg::to_dmatrix(&self.vt)?;
        let sigma = self.sigma.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        Ok(u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(sigma)) * vt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dev() -> Device {
        Device::Cpu
    }

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_slice(data, (rows, cols), &dev()).unwrap()
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        mat(rows, cols, &data)
    }

    fn diag32() -> SvdAdapter {
        SvdAdapter::decompose(&mat(2, 2, &[3.0, 0.0, 0.0, 2.0]), None).unwrap()
    }

    fn with_shift(a: &SvdAdapter, shift: &[f64]) -> SvdAdapter {
        a.with_scale_shift(
            Tensor::ones(2, DType::F64, &dev()).unwrap(),
            Tensor::from_slice(shift, 2, &dev()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn diagonal_matrix_decomposes_to_its_entries() {
        let a = diag32();
        assert_eq!(a.sigma().to_vec1::<f64>().unwrap(), vec![3.0, 2.0]);
        let rebuilt = a.reconstruct_f64().unwrap();
        assert_eq!(rebuilt, DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 2.0]));
        assert_eq!(a.scale().to_vec1::<f64>().unwrap(), vec![1.0, 1.0]);
        assert_eq!(a.shift().to_vec1::<f64>().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_matrix_has_zero_spectrum() {
        let a = SvdAdapter::decompose(&Tensor::zeros((4, 4), DType::F64, &dev()).unwrap(), None)
            .unwrap();
        assert_eq!(a.sigma().to_vec1::<f64>().unwrap(), vec![0.0; 4]);
        assert_eq!(a.reconstruct_f64().unwrap(), DMatrix::zeros(4, 4));
    }

    #[test]
    fn random_matrix_reconstructs_to_double_precision() {
        let w = random(8, 12, 7);
        let a = SvdAdapter::decompose(&w, None).unwrap();
        let err = linalg::relative_frobenius(&a.reconstruct_f64().unwrap(), &linalg::to_dmatrix(&w).unwrap());
        assert!(err <= 1e-10, "relative error {err}");
    }

    #[test]
    fn non_finite_weight_is_rejected_with_name() {
        let w = mat(2, 2, &[1.0, f64::INFINITY, 0.0, 1.0]);
        let err = SvdAdapter::decompose_named("blocks.0.qkv", &w, None).unwrap_err();
        assert!(err.to_string().contains("blocks.0.qkv"));
    }

    #[test]
    fn effective_weight_examples() {
        let a = diag32();
        assert_eq!(
            a.effective_weight().unwrap().to_vec2::<f64>().unwrap(),
            vec![vec![3.0, 0.0], vec![0.0, 2.0]]
        );
        assert_eq!(
            with_shift(&a, &[-1.0, -1.0]).effective_weight().unwrap().to_vec2::<f64>().unwrap(),
            vec![vec![2.0, 0.0], vec![0.0, 1.0]]
        );
        assert_eq!(
            with_shift(&a, &[-5.0, -5.0]).effective_weight().unwrap().to_vec2::<f64>().unwrap(),
            vec![vec![0.0, 0.0], vec![0.0, 0.0]]
        );
    }

    #[test]
    fn forward_examples() {
        let x = Tensor::from_slice(&[1.0f64, 1.0], 2, &dev()).unwrap();
        let a = diag32();
        assert_eq!(a.forward(&x).unwrap().to_vec1::<f64>().unwrap(), vec![3.0, 2.0]);
        let b = with_shift(&a, &[-1.0, -1.0]);
        assert_eq!(b.forward(&x).unwrap().to_vec1::<f64>().unwrap(), vec![2.0, 1.0]);
    }

    #[test]
    fn forward_batch_matches_dense_matmul() {
        let w = random(8, 12, 3);
        let b = Tensor::from_slice(&[0.5f64; 8], 8, &dev()).unwrap();
        let a = SvdAdapter::decompose(&w, Some(&b)).unwrap();
        let x = random(4, 12, 4);
        let got = linalg::to_dmatrix(&a.forward(&x).unwrap()).unwrap();
        let dense = linalg::to_dmatrix(&x.matmul(&w.t().unwrap()).unwrap().broadcast_add(&b).unwrap())
            .unwrap();
        assert!(linalg::relative_frobenius(&got, &dense) <= 1e-6);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let a = diag32();
        let x = Tensor::zeros(3, DType::F64, &dev()).unwrap();
        assert!(matches!(a.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn merge_returns_effective_weight_and_bias() {
        let w = random(5, 3, 11);
        let b = Tensor::from_slice(&[1.0f64, 2.0, 3.0, 4.0, 5.0], 5, &dev()).unwrap();
        let a = SvdAdapter::decompose(&w, Some(&b)).unwrap();
        let (merged, mb) = a.merge().unwrap();
        let err = linalg::relative_frobenius(&linalg::to_dmatrix(&merged).unwrap(), &linalg::to_dmatrix(&w).unwrap());
        assert!(err < 1e-10);
        assert_eq!(mb.unwrap().to_vec1::<f64>().unwrap(), b.to_vec1::<f64>().unwrap());

        let clamped = a
            .with_scale_shift(
                Tensor::ones(3, DType::F64, &dev()).unwrap(),
                Tensor::full(-1e6f64, 3, &dev()).unwrap(),
            )
            .unwrap();
        let (z, _) = clamped.merge().unwrap();
        assert!(z.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trainable_count_is_twice_the_rank() {
        assert_eq!(diag32().trainable_count(), 4);
        let a = SvdAdapter::decompose(&random(12, 8, 1), None).unwrap();
        assert_eq!(a.trainable_count(), 16);
        assert_eq!(a.scale().elem_count() + a.shift().elem_count(), 16);
    }

    #[test]
    fn effective_sigma_is_never_negative() {
        let a = SvdAdapter::decompose(&random(6, 6, 5), None).unwrap();
        let b = a
            .with_scale_shift(
                Tensor::from_slice(&[-2.0f64, 0.5, 1.0, 3.0, -0.1, 1.0], 6, &dev()).unwrap(),
                Tensor::from_slice(&[0.1f64, -3.0, 0.0, 0.2, -0.5, 0.0], 6, &dev()).unwrap(),
            )
            .unwrap();
        assert!(b.effective_sigma().unwrap().to_vec1::<f64>().unwrap().iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn relu_kink_has_zero_subgradient() {
        let v = candle_core::Var::from_slice(&[0.0f64, 1.0, -1.0], 3, &dev()).unwrap();
        let y = relu_zero_kink(v.as_tensor()).unwrap().sum_all().unwrap();
        let g = y.backward().unwrap();
        assert_eq!(g.get(v.as_tensor()).unwrap().to_vec1::<f64>().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn single_shift_moves_exactly_one_singular_value() {
        let a = SvdAdapter::decompose(&random(6, 9, 21), None).unwrap();
        let sigma = a.sigma().to_vec1::<f64>().unwrap();
        for i in 0..6 {
            let mut shift = vec![0.0; 6];
            shift[i] = 0.25;
            let b = a
                .with_scale_shift(
                    Tensor::ones(6, DType::F64, &dev()).unwrap(),
                    Tensor::from_slice(&shift, 6, &dev()).unwrap(),
                )
                .unwrap();
            let w = linalg::to_dmatrix(&b.effective_weight().unwrap()).unwrap();
            let mut got: Vec<f64> = w.singular_values().iter().copied().collect();
            got.sort_by(|x, y| y.total_cmp(x));
            let mut want = sigma.clone();
            want[i] += 0.25;
            want.sort_by(|x, y| y.total_cmp(x));
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-10, "direction {i}: {got:?} vs {want:?}");
            }
        }
    }
}
