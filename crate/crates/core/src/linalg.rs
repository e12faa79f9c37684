//! Conversions between candle tensors and nalgebra matrices, plus the
//! double-precision thin SVD used when freezing weight spectra.

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const SVD_MAX_ITERATIONS: usize = 10_000;

/// Thin SVD factors with singular values sorted in non-increasing order.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub vt: DMatrix<f64>,
}

pub fn to_dmatrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let (rows, cols) = t.dims2()?;
    let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn from_dmatrix(m: &DMatrix<f64>, dtype: DType, device: &Device) -> Result<Tensor> {
    // nalgebra is column-major; transpose to get row-major storage order.
    let data: Vec<f64> = m.transpose().iter().copied().collect();
    Ok(Tensor::from_vec(data, (m.nrows(), m.ncols()), device)?.to_dtype(dtype)?)
}

pub fn from_dvector(v: &DVector<f64>, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(v.iter().copied().collect::<Vec<_>>(), v.len(), device)?.to_dtype(dtype)?)
}

/// Thin SVD of `m` (rank `min(rows, cols)`), sorted by descending singular value.
pub fn thin_svd(name: &str, m: &DMatrix<f64>) -> Result<ThinSvd> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::DecompositionInput {
            name: name.to_string(),
        });
    }
    let svd = m
        .clone()
        .try_svd(true, true, f64::EPSILON, SVD_MAX_ITERATIONS)
        .ok_or_else(|| Error::Numerical {
            name: name.to_string(),
        })?;
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => {
            return Err(Error::Numerical {
                name: name.to_string(),
            })
        }
    };
    let rank = m.nrows().min(m.ncols());
    let mut order: Vec<usize> = (0..rank).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let sigma = DVector::from_iterator(rank, order.iter().map(|&i| svd.singular_values[i].max(0.0)));
    let u = DMatrix::from_columns(&order.iter().map(|&i| u.column(i)).collect::<Vec<_>>());
    let vt = DMatrix::from_rows(&order.iter().map(|&i| vt.row(i)).collect::<Vec<_>>());
    Ok(ThinSvd { u, sigma, vt })
}

/// `‖a - b‖_F / max(‖b‖_F, tiny)`.
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm().max(f64::MIN_POSITIVE);
    (a - b).norm() / denom
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svd_is_sorted_and_reconstructs() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 0.0, 2.0, 7.0, -1.0]);
        let svd = thin_svd("m", &m).unwrap();
        assert!(svd.sigma.iter().zip(svd.sigma.iter().skip(1)).all(|(a, b)| a >= b));
        let rebuilt = &svd.u * DMatrix::from_diagonal(&svd.sigma) * &svd.vt;
        assert!(relative_frobenius(&rebuilt, &m) < 1e-12);
    }

    #[test]
    fn rejects_non_finite_input() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, f64::NAN, 0.0, 1.0]);
        assert!(matches!(
            thin_svd("bad", &m),
            Err(Error::DecompositionInput { name }) if name == "bad"
        ));
    }

    #[test]
    fn tensor_roundtrip_is_row_major() {
        let t = Tensor::from_vec(vec![1f32, 2., 3., 4., 5., 6.], (2, 3), &Device::Cpu).unwrap();
        let m = to_dmatrix(&t).unwrap();
        assert_eq!(m[(0, 2)], 3.0);
        assert_eq!(m[(1, 0)], 4.0);
        let back = from_dmatrix(&m, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(back.to_vec2::<f32>().unwrap(), t.to_vec2::<f32>().unwrap());
    }
}
