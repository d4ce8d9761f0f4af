//! U-Net noise predictor.
//!
//! Timesteps are embedded sinusoidally, passed through an MLP and summed with
//! a projection of the identity vector; the sum modulates every residual
//! block. Fused condition tokens enter through cross-attention layers at the
//! configured resolutions, with U-Net activations as queries.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{conv2d, group_norm, linear, Conv2d, Conv2dConfig, GroupNorm, Linear, VarBuilder};

use crate::config::{DenoiserConfig, ModelConfig};
use crate::diffusion::NoisePredictor;
use crate::error::{shape_err, Result};
use crate::fusion::{cross_attention, merge_heads, split_heads, FusedTokens};

/// `[sin(t·f_0) … sin(t·f_{h−1}), cos(t·f_0) … cos(t·f_{h−1})]`, `f_i = 10000^{−i/h}`.
pub fn timestep_embedding(t: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut values = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let ti = ti as f64;
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((ti * f).sin(), (ti * f).cos())).unzip();
        values.extend(sin);
        values.extend(cos);
        values.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(values, (t.len(), dim), device)?.to_dtype(dtype)?)
}

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(cin: usize, cout: usize, temb: usize, groups: usize, vb: VarBuilder) -> Result<Self> {
        let same = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        Ok(Self {
            norm1: group_norm(groups, cin, NORM_EPS, vb.pp("norm1"))?,
            conv1: conv2d(cin, cout, 3, same, vb.pp("conv1"))?,
            emb: linear(temb, cout, vb.pp("emb"))?,
            norm2: group_norm(groups, cout, NORM_EPS, vb.pp("norm2"))?,
            conv2: conv2d(cout, cout, 3, same, vb.pp("conv2"))?,
            skip: if cin != cout {
                Some(conv2d(cin, cout, 1, Default::default(), vb.pp("skip"))?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let e = self.emb.forward(&emb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&e)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Cross-attention from spatial activations onto the fused condition tokens.
#[derive(Debug, Clone)]
struct AttnBlock {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl AttnBlock {
    fn new(ch: usize, ctx_dim: usize, heads: usize, groups: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm: group_norm(groups, ch, NORM_EPS, vb.pp("norm"))?,
            q: linear(ch, ch, vb.pp("q"))?,
            k: linear(ctx_dim, ch, vb.pp("k"))?,
            v: linear(ctx_dim, ch, vb.pp("v"))?,
            out: linear(ch, ch, vb.pp("out"))?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        // Contiguous on purpose: candle's Linear takes a broadcast-matmul path for
        // strided 3-D inputs that returns wrong values on CPU.
        let seq = self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let q = split_heads(&self.q.forward(&seq)?, self.heads)?;
        let k = split_heads(&self.k.forward(ctx)?, self.heads)?;
        let v = split_heads(&self.v.forward(ctx)?, self.heads)?;
        let a = self.out.forward(&merge_heads(&cross_attention(&q, &k, &v)?)?)?;
        let a = a.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + a)?)
    }
}

#[derive(Debug, Clone)]
struct DownLevel {
    res: ResBlock,
    attn: Option<AttnBlock>,
    down: Conv2d,
}

#[derive(Debug, Clone)]
struct UpLevel {
    up: Conv2d,
    res: ResBlock,
    attn: Option<AttnBlock>,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    resolution: usize,
    image_channels: usize,
    token_dim: usize,
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    id_proj: Linear,
    down: Vec<DownLevel>,
    mid1: ResBlock,
    mid_attn: Option<AttnBlock>,
    mid2: ResBlock,
    up: Vec<UpLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Denoiser {
    pub fn new(model: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let cfg = model.denoiser.clone();
        cfg.validate(model.resolution)?;
        let base = cfg.base_channels;
        let groups = cfg.norm_groups;
        let temb = cfg.time_dim();
        let d = model.token_dim;
        let heads = cfg.attention_heads;
        let same = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let stride2 = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let wants_attn = |r: usize| cfg.attention_resolutions.contains(&r);

        let conv_in = conv2d(model.image_channels, base, 3, same, vb.pp("conv_in"))?;
        let time1 = linear(base, temb, vb.pp("time1"))?;
        let time2 = linear(temb, temb, vb.pp("time2"))?;
        let id_proj = linear(d, temb, vb.pp("id_proj"))?;

        let mut down = Vec::new();
        let mut ch = base;
        let mut res = model.resolution;
        let mut skip_ch = Vec::new();
        for (i, m) in cfg.channel_mults.iter().enumerate() {
            let out = base * m;
            let vbl = vb.pp(format!("down{i}"));
            let attn = if wants_attn(res) {
                Some(AttnBlock::new(out, d, heads, groups, vbl.pp("attn"))?)
            } else {
                None
            };
            down.push(DownLevel {
                res: ResBlock::new(ch, out, temb, groups, vbl.pp("res"))?,
                attn,
                down: conv2d(out, out, 3, stride2, vbl.pp("down"))?,
            });
            skip_ch.push(out);
            ch = out;
            res /= 2;
        }

        let mid1 = ResBlock::new(ch, ch, temb, groups, vb.pp("mid1"))?;
        let mid_attn = if wants_attn(res) {
            Some(AttnBlock::new(ch, d, heads, groups, vb.pp("mid_attn"))?)
        } else {
            None
        };
        let mid2 = ResBlock::new(ch, ch, temb, groups, vb.pp("mid2"))?;

        let mut up = Vec::new();
        for (i, m) in cfg.channel_mults.iter().enumerate().rev() {
            let out = base * m;
            res *= 2;
            let vbl = vb.pp(format!("up{i}"));
            let attn = if wants_attn(res) {
                Some(AttnBlock::new(out, d, heads, groups, vbl.pp("attn"))?)
            } else {
                None
            };
            up.push(UpLevel {
                up: conv2d(ch, ch, 3, same, vbl.pp("up"))?,
                res: ResBlock::new(ch + skip_ch[i], out, temb, groups, vbl.pp("res"))?,
                attn,
            });
            ch = out;
        }

        let norm_out = group_norm(groups, ch, NORM_EPS, vb.pp("norm_out"))?;
        let conv_out = conv2d(ch, model.image_channels, 3, same, vb.pp("conv_out"))?;
        Ok(Self {
            cfg,
            resolution: model.resolution,
            image_channels: model.image_channels,
            token_dim: d,
            conv_in,
            time1,
            time2,
            id_proj,
            down,
            mid1,
            mid_attn,
            mid2,
            up,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Number of cross-attention layers in the network.
    pub fn attention_layers(&self) -> usize {
        self.down.iter().filter(|l| l.attn.is_some()).count()
            + self.up.iter().filter(|l| l.attn.is_some()).count()
            + usize::from(self.mid_attn.is_some())
    }

    fn embedding(&self, t: &[usize], id_vector: &Tensor, dtype: DType, device: &Device) -> Result<Tensor> {
        let sin = timestep_embedding(t, self.cfg.base_channels, dtype, device)?;
        let temb = self.time2.forward(&self.time1.forward(&sin)?.silu()?)?;
        Ok((temb + self.id_proj.forward(id_vector)?)?)
    }

    /// `ε_θ(x_t, t, conditions)`, same shape as `x_t`.
    pub fn predict_noise(&self, x_t: &Tensor, t: &[usize], fused: &FusedTokens, id_vector: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x_t.dims4()?;
        if c != self.image_channels || h != self.resolution || w != self.resolution {
            return Err(shape_err(format!(
                "denoiser expects [B, {}, {r}, {r}], got {:?}",
                self.image_channels,
                x_t.dims(),
                r = self.resolution
            )));
        }
        if t.len() != b {
            return Err(shape_err(format!("{} timesteps for batch {b}", t.len())));
        }
        let (fb, _, fd) = fused.tokens.dims3()?;
        if fb != b || fd != self.token_dim {
            return Err(shape_err(format!("fused tokens {:?} for batch {b}, dim {}", fused.tokens.dims(), self.token_dim)));
        }
        if id_vector.dims() != [b, self.token_dim] {
            return Err(shape_err(format!("identity vector {:?}, expected [{b}, {}]", id_vector.dims(), self.token_dim)));
        }
        let ctx = &fused.tokens;
        let emb = self.embedding(t, id_vector, x_t.dtype(), x_t.device())?;

        let mut hcur = self.conv_in.forward(x_t)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for level in &self.down {
            hcur = level.res.forward(&hcur, &emb)?;
            if let Some(a) = &level.attn {
                hcur = a.forward(&hcur, ctx)?;
            }
            skips.push(hcur.clone());
            hcur = level.down.forward(&hcur)?;
        }
        hcur = self.mid1.forward(&hcur, &emb)?;
        if let Some(a) = &self.mid_attn {
            hcur = a.forward(&hcur, ctx)?;
        }
        hcur = self.mid2.forward(&hcur, &emb)?;
        for level in &self.up {
            let (_, _, hh, ww) = hcur.dims4()?;
            hcur = level.up.forward(&hcur.upsample_nearest2d(hh * 2, ww * 2)?)?;
            let skip = skips.pop().expect("one skip per level");
            hcur = Tensor::cat(&[&hcur, &skip], 1)?;
            hcur = level.res.forward(&hcur, &emb)?;
            if let Some(a) = &level.attn {
                hcur = a.forward(&hcur, ctx)?;
            }
        }
        Ok(self.conv_out.forward(&self.norm_out.forward(&hcur)?.silu()?)?)
    }
}

/// A denoiser with its conditions bound, usable by the sampler.
pub struct ConditionedDenoiser<'a> {
    pub net: &'a Denoiser,
    pub fused: &'a FusedTokens,
    pub id_vector: &'a Tensor,
}

impl NoisePredictor for ConditionedDenoiser<'_> {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.net.predict_noise(x_t, t, self.fused, self.id_vector)
    }
}
