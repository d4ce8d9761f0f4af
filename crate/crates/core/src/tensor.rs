//! Small tensor helpers shared across modules.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result};

/// Standard normal tensor drawn from a caller-owned RNG.
pub fn randn<R: Rng + ?Sized>(rng: &mut R, dims: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(values, dims, device)?.to_dtype(dtype)?)
}

/// Per-batch-item coefficient broadcastable against a `[B, ...]` tensor of rank `rank`.
pub fn per_item(values: &[f64], rank: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut dims = vec![values.len()];
    dims.extend(std::iter::repeat_n(1, rank.saturating_sub(1)));
    Ok(Tensor::from_vec(values.to_vec(), dims, device)?.to_dtype(dtype)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn ensure_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn all_finite(t: &Tensor) -> Result<bool> {
    Ok(to_f64_vec(t)?.iter().all(|v| v.is_finite()))
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(scalar(&(a - b)?.abs()?.flatten_all()?.max(0)?)?)
}
