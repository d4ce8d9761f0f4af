//! Denoising, identity-consistency and landmark losses.

use candle_core::{Tensor, D};

use crate::conditioners::{IdentityEmbedder, KeypointDetector};
use crate::error::{shape_err, Error, Result};
use crate::tensor::ensure_same_shape;

/// Norm floor in the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Mean of squared elementwise differences.
pub fn loss_mse(eps: &Tensor, eps_pred: &Tensor) -> Result<Tensor> {
    ensure_same_shape(eps, eps_pred, "mse operands")?;
    Ok((eps - eps_pred)?.sqr()?.mean_all()?)
}

/// Row-wise cosine similarity of `[B, m]` features, norms floored at [`COSINE_EPS`].
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure_same_shape(a, b, "cosine operands")?;
    if a.rank() != 2 {
        return Err(shape_err(format!("features must be [B, m], got {:?}", a.dims())));
    }
    let dot = (a * b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?.maximum(COSINE_EPS)?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?.maximum(COSINE_EPS)?;
    Ok((dot / (na * nb)?)?)
}

/// Per-item weights `(t/T, (T−t)/T)` for the identity and expression-source terms.
pub fn identity_weights(t: &[usize], steps: usize) -> Result<Vec<(f64, f64)>> {
    if steps == 0 {
        return Err(Error::Config("identity loss needs T > 0".into()));
    }
    t.iter()
        .map(|&ti| {
            if ti > steps {
                return Err(Error::TimestepOutOfRange { t: ti, steps });
            }
            let w = ti as f64 / steps as f64;
            Ok((w, (steps - ti) as f64 / steps as f64))
        })
        .collect()
}

/// Identity loss from precomputed features `F(x_id)`, `F(x0_ref)`, `F(x̂₀)`; batch-averaged.
pub fn identity_loss_from_features(
    f_id: &Tensor,
    f_ref: &Tensor,
    f_hat: &Tensor,
    t: &[usize],
    steps: usize,
) -> Result<Tensor> {
    let b = f_hat.dim(0)?;
    if t.len() != b {
        return Err(shape_err(format!("{} timesteps for a batch of {b}", t.len())));
    }
    let weights = identity_weights(t, steps)?;
    let dev = f_hat.device();
    let dt = f_hat.dtype();
    let w_id = Tensor::from_vec(weights.iter().map(|w| w.0).collect::<Vec<_>>(), b, dev)?.to_dtype(dt)?;
    let w_ref = Tensor::from_vec(weights.iter().map(|w| w.1).collect::<Vec<_>>(), b, dev)?.to_dtype(dt)?;
    let cs_id = cosine_similarity(f_id, f_hat)?;
    let cs_ref = cosine_similarity(f_ref, f_hat)?;
    let per_item = ((cs_id * w_id)? + (cs_ref * w_ref)?)?;
    Ok(per_item.mean_all()?.neg()?)
}

/// `−(t/T)·CS(F(x_id), F(x̂₀)) − ((T−t)/T)·CS(F(x0_ref), F(x̂₀))`, averaged over the batch.
pub fn loss_identity(
    x_id: &Tensor,
    x0_ref: &Tensor,
    x0_hat: &Tensor,
    t: &[usize],
    steps: usize,
    feature: &dyn IdentityEmbedder,
) -> Result<Tensor> {
    identity_loss_from_features(
        &feature.embed_identity(x_id)?,
        &feature.embed_identity(x0_ref)?,
        &feature.embed_identity(x0_hat)?,
        t,
        steps,
    )
}

/// Mean squared difference of keypoint coordinates.
pub fn landmark_loss_from_points(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    ensure_same_shape(pred, target, "keypoint sets")?;
    Ok((pred - target)?.sqr()?.mean_all()?)
}

pub fn loss_landmark(x0_hat: &Tensor, x0: &Tensor, detector: &dyn KeypointDetector) -> Result<Tensor> {
    landmark_loss_from_points(&detector.detect(x0_hat)?, &detector.detect(x0)?)
}
