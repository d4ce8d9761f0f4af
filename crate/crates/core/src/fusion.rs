//! Cyclic cross-attention fusion of the three condition streams.
//!
//! Each stream is projected to per-head query/key/value spaces. Identity
//! queries attend over expression keys/values, expression queries over
//! landmarks, and landmark queries over identity. The three attended
//! blocks are re-projected and concatenated in that order.

use candle_core::{Module, Tensor, D};
use candle_nn::{linear, Linear, VarBuilder};

use crate::conditioners::{ConditionBundle, TOKEN_COUNT};
use crate::error::{shape_err, Error, Result};

/// Per-head `Q`, `K`, `V`, each `[B, heads, n, d_k]`.
#[derive(Debug, Clone)]
pub struct QkvSpaces {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

/// Learned `W^Q`, `W^K`, `W^V` for one token stream. Head `h` uses the
/// `h`-th column block of each matrix, i.e. its own `d × d_k` projection.
#[derive(Debug, Clone)]
pub struct QkvProjection {
    q: Linear,
    k: Linear,
    v: Linear,
    heads: usize,
    dim: usize,
}

impl QkvProjection {
    pub fn new(dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide token dim {dim}")));
        }
        Ok(Self {
            q: linear(dim, dim, vb.pp("q"))?,
            k: linear(dim, dim, vb.pp("k"))?,
            v: linear(dim, dim, vb.pp("v"))?,
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn project(&self, tokens: &Tensor) -> Result<QkvSpaces> {
        let (_, _, d) = tokens.dims3()?;
        if d != self.dim {
            return Err(shape_err(format!("tokens have dim {d}, projection expects {}", self.dim)));
        }
        Ok(QkvSpaces {
            q: split_heads(&self.q.forward(tokens)?, self.heads)?,
            k: split_heads(&self.k.forward(tokens)?, self.heads)?,
            v: split_heads(&self.v.forward(tokens)?, self.heads)?,
        })
    }
}

/// `[B, n, d]` → `[B, heads, n, d / heads]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, d) = x.dims3()?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide dim {d}")));
    }
    Ok(x.reshape((b, n, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

/// `[B, heads, n, d_k]` → `[B, n, heads · d_k]`.
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, n, dk) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, n, h * dk))?)
}

/// Row-wise softmax over the last axis, shifted by the row maximum.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let num = logits.broadcast_sub(&max)?.exp()?;
    let den = num.sum_keepdim(D::Minus1)?;
    Ok(num.broadcast_div(&den)?)
}

/// `Softmax(Q·Kᵀ/√d_k)`, `[..., n, m]`.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (qd, kd) = (q.dims(), k.dims());
    if qd.len() < 2 || qd.len() != kd.len() || qd[qd.len() - 1] != kd[kd.len() - 1] || qd[..qd.len() - 2] != kd[..kd.len() - 2] {
        return Err(shape_err(format!("query {qd:?} and key {kd:?} do not align")));
    }
    let dk = *qd.last().unwrap() as f64;
    let logits = (q.matmul(&k.t()?.contiguous()?)? / dk.sqrt())?;
    softmax_rows(&logits)
}

/// `Softmax(Q1·K2ᵀ/√d_k)·V2` with any shared leading axes.
pub fn cross_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if k.dims() != v.dims() {
        return Err(shape_err(format!("key {:?} and value {:?} differ", k.dims(), v.dims())));
    }
    let w = attention_weights(q, k)?;
    Ok(w.matmul(&v.contiguous()?)?)
}

/// Concatenated conditioning sequence, `[B, rows, d]`.
#[derive(Debug, Clone)]
pub struct FusedTokens {
    pub tokens: Tensor,
}

impl FusedTokens {
    pub fn rows(&self) -> Result<usize> {
        Ok(self.tokens.dim(1)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionMode {
    /// Off: plain concatenation of the raw token sets.
    pub cross_fusion: bool,
    /// Off: landmark tokens are left out and identity/expression exchange with each other.
    pub landmarks: bool,
}

impl Default for FusionMode {
    fn default() -> Self {
        Self {
            cross_fusion: true,
            landmarks: true,
        }
    }
}

impl From<crate::config::AblationFlags> for FusionMode {
    fn from(f: crate::config::AblationFlags) -> Self {
        Self {
            cross_fusion: f.cross_fusion,
            landmarks: f.landmarks,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CrossFusion {
    id: QkvProjection,
    exp: QkvProjection,
    lm: QkvProjection,
    out: [Linear; 3],
    heads: usize,
}

impl CrossFusion {
    pub fn new(dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            id: QkvProjection::new(dim, heads, vb.pp("id"))?,
            exp: QkvProjection::new(dim, heads, vb.pp("exp"))?,
            lm: QkvProjection::new(dim, heads, vb.pp("lm"))?,
            out: [
                linear(dim, dim, vb.pp("out0"))?,
                linear(dim, dim, vb.pp("out1"))?,
                linear(dim, dim, vb.pp("out2"))?,
            ],
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn projections(&self) -> [&QkvProjection; 3] {
        [&self.id, &self.exp, &self.lm]
    }

    fn block(&self, idx: usize, query: &QkvSpaces, source: &QkvSpaces) -> Result<Tensor> {
        let attended = cross_attention(&query.q, &source.k, &source.v)?;
        Ok(self.out[idx].forward(&merge_heads(&attended)?)?)
    }

    pub fn fuse(&self, bundle: &ConditionBundle, mode: FusionMode) -> Result<FusedTokens> {
        bundle.validate()?;
        let tokens = match (mode.cross_fusion, mode.landmarks) {
            (false, true) => Tensor::cat(&[&bundle.id_tokens, &bundle.exp_tokens, &bundle.lm_tokens], 1)?,
            (false, false) => Tensor::cat(&[&bundle.id_tokens, &bundle.exp_tokens], 1)?,
            (true, true) => {
                let id = self.id.project(&bundle.id_tokens)?;
                let exp = self.exp.project(&bundle.exp_tokens)?;
                let lm = self.lm.project(&bundle.lm_tokens)?;
                let blocks = [
                    self.block(0, &id, &exp)?,
                    self.block(1, &exp, &lm)?,
                    self.block(2, &lm, &id)?,
                ];
                Tensor::cat(&blocks, 1)?
            }
            (true, false) => {
                let id = self.id.project(&bundle.id_tokens)?;
                let exp = self.exp.project(&bundle.exp_tokens)?;
                Tensor::cat(&[self.block(0, &id, &exp)?, self.block(1, &exp, &id)?], 1)?
            }
        };
        Ok(FusedTokens { tokens })
    }

    /// Row count produced by [`CrossFusion::fuse`] under `mode`.
    pub fn rows(mode: FusionMode) -> usize {
        if mode.landmarks {
            3 * TOKEN_COUNT
        } else {
            2 * TOKEN_COUNT
        }
    }
}
