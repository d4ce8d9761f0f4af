//! Identity, expression-deviation and landmark feature extractors.
//!
//! All three are built on [`Encoder`], a small strided convolutional stack
//! that maps a square image to a `d × 7 × 7` feature map. Flattening that
//! map gives the 49 condition tokens consumed by the fusion module.

use candle_core::{Module, Tensor, D};
use candle_nn::{conv2d, linear, Conv2d, Conv2dConfig, Init, Linear, VarBuilder};

use crate::config::ModelConfig;
use crate::error::{shape_err, Error, Result};

pub const TOKEN_GRID: usize = 7;
pub const TOKEN_COUNT: usize = TOKEN_GRID * TOKEN_GRID;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub resolution: usize,
    pub width: usize,
    pub dim: usize,
}

impl EncoderConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            in_channels: cfg.image_channels,
            resolution: cfg.resolution,
            width: cfg.encoder_width,
            dim: cfg.token_dim,
        }
    }
}

/// Strided convolutional encoder ending in a `[B, d, 7, 7]` map.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    stem: Conv2d,
    downs: Vec<Conv2d>,
    resize: Option<Conv2d>,
    proj: Conv2d,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, vb: VarBuilder) -> Result<Self> {
        if cfg.resolution < TOKEN_GRID {
            return Err(Error::Config(format!(
                "encoder resolution {} below the {TOKEN_GRID}x{TOKEN_GRID} token grid",
                cfg.resolution
            )));
        }
        let same = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let stride2 = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let stem = conv2d(cfg.in_channels, cfg.width, 3, same, vb.pp("stem"))?;
        let mut downs = Vec::new();
        let mut size = cfg.resolution;
        let mut ch = cfg.width;
        while (size - 1) / 2 + 1 >= TOKEN_GRID && size > TOKEN_GRID {
            let out = (ch * 2).min(cfg.dim.max(cfg.width));
            downs.push(conv2d(ch, out, 3, stride2, vb.pp(format!("down{}", downs.len())))?);
            ch = out;
            size = (size - 1) / 2 + 1;
        }
        // Valid convolution trims the remaining border down to the token grid.
        let resize = if size > TOKEN_GRID {
            Some(conv2d(ch, ch, size - TOKEN_GRID + 1, Default::default(), vb.pp("resize"))?)
        } else {
            None
        };
        let proj = conv2d(ch, cfg.dim, 1, Default::default(), vb.pp("proj"))?;
        Ok(Self {
            cfg,
            stem,
            downs,
            resize,
            proj,
        })
    }

    pub fn config(&self) -> EncoderConfig {
        self.cfg
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        let c = &self.cfg;
        if dims.len() != 4 || dims[1] != c.in_channels || dims[2] != c.resolution || dims[3] != c.resolution {
            return Err(shape_err(format!(
                "encoder expects [B, {}, {}, {}], got {dims:?}",
                c.in_channels, c.resolution, c.resolution
            )));
        }
        Ok(())
    }

    /// Every intermediate activation, shallow to deep; the last is the `[B, d, 7, 7]` map.
    pub fn forward_layers(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut layers = Vec::with_capacity(self.downs.len() + 3);
        let mut h = self.stem.forward(x)?.silu()?;
        layers.push(h.clone());
        for down in &self.downs {
            h = down.forward(&h)?.silu()?;
            layers.push(h.clone());
        }
        if let Some(resize) = &self.resize {
            h = resize.forward(&h)?.silu()?;
            layers.push(h.clone());
        }
        layers.push(self.proj.forward(&h)?);
        Ok(layers)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_layers(x)?.pop().expect("encoder has layers"))
    }
}

/// `[B, d, 7, 7]` → `[B, 49, d]`, row-major over the grid.
pub fn map_to_tokens(map: &Tensor) -> Result<Tensor> {
    let (b, d, h, w) = map.dims4()?;
    if h * w != TOKEN_COUNT {
        return Err(shape_err(format!("expected a 7x7 map, got {h}x{w}")));
    }
    Ok(map.reshape((b, d, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Condition features for one batch.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    /// `[B, d]` final identity feature.
    pub id_vector: Tensor,
    /// `[B, 49, d]` each.
    pub id_tokens: Tensor,
    pub exp_tokens: Tensor,
    pub lm_tokens: Tensor,
}

impl ConditionBundle {
    pub fn validate(&self) -> Result<()> {
        let (b, n, d) = self.id_tokens.dims3()?;
        if n != TOKEN_COUNT {
            return Err(shape_err(format!("identity tokens have {n} rows, expected {TOKEN_COUNT}")));
        }
        for (name, t) in [("expression", &self.exp_tokens), ("landmark", &self.lm_tokens)] {
            if t.dims() != [b, TOKEN_COUNT, d] {
                return Err(shape_err(format!(
                    "{name} tokens {:?} do not match identity tokens {:?}",
                    t.dims(),
                    self.id_tokens.dims()
                )));
            }
        }
        if self.id_vector.dims() != [b, d] {
            return Err(shape_err(format!("identity vector {:?}, expected [{b}, {d}]", self.id_vector.dims())));
        }
        Ok(())
    }

    pub fn batch(&self) -> Result<usize> {
        Ok(self.id_tokens.dim(0)?)
    }

    pub fn dim(&self) -> Result<usize> {
        Ok(self.id_tokens.dim(2)?)
    }

    pub fn all_finite(&self) -> Result<bool> {
        for t in [&self.id_vector, &self.id_tokens, &self.exp_tokens, &self.lm_tokens] {
            if !crate::tensor::all_finite(t)? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// The frozen identity embedding used by the identity consistency loss.
pub trait IdentityEmbedder {
    /// `[B, C, H, W]` → `[B, m]`.
    fn embed_identity(&self, x: &Tensor) -> Result<Tensor>;
}

/// Differentiable keypoint detector.
pub trait KeypointDetector {
    /// `[B, C, H, W]` → `[B, K, 2]` normalized `(x, y)` coordinates.
    fn detect(&self, x: &Tensor) -> Result<Tensor>;
}

/// Identity extractor: tokens from the spatial map, a vector from the head.
#[derive(Debug, Clone)]
pub struct IdentityExtractor {
    encoder: Encoder,
    pos_emb: Tensor,
    head: Linear,
    use_pos_emb: bool,
}

impl IdentityExtractor {
    pub fn new(cfg: EncoderConfig, vb: VarBuilder) -> Result<Self> {
        let encoder = Encoder::new(cfg, vb.pp("encoder"))?;
        let pos_emb = vb.get_with_hints(
            (TOKEN_COUNT, cfg.dim),
            "pos_emb",
            Init::Randn { mean: 0.0, stdev: 0.02 },
        )?;
        let head = linear(cfg.dim, cfg.dim, vb.pp("head"))?;
        Ok(Self {
            encoder,
            pos_emb,
            head,
            use_pos_emb: true,
        })
    }

    /// Drop the positional embedding from the token output.
    pub fn without_positional_embedding(mut self) -> Self {
        self.use_pos_emb = false;
        self
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    fn vector_from_map(&self, map: &Tensor) -> Result<Tensor> {
        let pooled = map.mean(D::Minus1)?.mean(D::Minus1)?;
        Ok(self.head.forward(&pooled)?)
    }

    /// Returns `(id_vector [B, d], id_tokens [B, 49, d])`.
    pub fn extract(&self, x_id: &Tensor) -> Result<(Tensor, Tensor)> {
        let map = self.encoder.forward(x_id)?;
        let mut tokens = map_to_tokens(&map)?;
        if self.use_pos_emb {
            tokens = tokens.broadcast_add(&self.pos_emb)?;
        }
        Ok((self.vector_from_map(&map)?, tokens))
    }
}

impl IdentityEmbedder for IdentityExtractor {
    fn embed_identity(&self, x: &Tensor) -> Result<Tensor> {
        let map = self.encoder.forward(x)?;
        self.vector_from_map(&map)
    }
}

/// Twin encoders whose difference isolates expression, then a 1×1 channel alignment.
#[derive(Debug, Clone)]
pub struct ExpressionExtractor {
    face: Encoder,
    identity: Encoder,
    align: Conv2d,
}

impl ExpressionExtractor {
    pub fn new(cfg: EncoderConfig, vb: VarBuilder) -> Result<Self> {
        Self::from_parts(
            Encoder::new(cfg, vb.pp("face"))?,
            Encoder::new(cfg, vb.pp("id"))?,
            vb.pp("align"),
        )
    }

    /// The identity twin is loaded from `id_vb`, typically the frozen identity classifier's encoder.
    pub fn from_parts(face: Encoder, identity: Encoder, align_vb: VarBuilder) -> Result<Self> {
        if face.config() != identity.config() {
            return Err(shape_err("face and identity encoders must share one architecture"));
        }
        let d = face.config().dim;
        let align = conv2d(d, d, 1, Default::default(), align_vb)?;
        Ok(Self { face, identity, align })
    }

    pub fn face_encoder(&self) -> &Encoder {
        &self.face
    }

    /// `F_face(x) − F_id(x)` as a `[B, d, 7, 7]` map, before alignment.
    pub fn deviation(&self, x0: &Tensor) -> Result<Tensor> {
        let f = self.face.forward(x0)?;
        let i = self.identity.forward(x0)?;
        if f.dims() != i.dims() {
            return Err(shape_err(format!("twin outputs differ: {:?} vs {:?}", f.dims(), i.dims())));
        }
        Ok((f - i)?)
    }

    pub fn align(&self, deviation: &Tensor) -> Result<Tensor> {
        map_to_tokens(&self.align.forward(deviation)?)
    }

    /// `[B, 49, d]` expression tokens.
    pub fn extract(&self, x0: &Tensor) -> Result<Tensor> {
        self.align(&self.deviation(x0)?)
    }
}

/// Keypoint detector whose trunk doubles as the landmark feature extractor.
#[derive(Debug, Clone)]
pub struct LandmarkNet {
    trunk: Encoder,
    head: Linear,
    keypoints: usize,
}

impl LandmarkNet {
    pub fn new(cfg: EncoderConfig, keypoints: usize, vb: VarBuilder) -> Result<Self> {
        let trunk = Encoder::new(cfg, vb.pp("trunk"))?;
        let head = linear(TOKEN_COUNT * cfg.dim, 2 * keypoints, vb.pp("head"))?;
        Ok(Self { trunk, head, keypoints })
    }

    pub fn keypoints(&self) -> usize {
        self.keypoints
    }

    /// `[B, 49, d]` tokens from the trunk's last spatial stage, output head removed.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        map_to_tokens(&self.trunk.forward(x)?)
    }
}

impl KeypointDetector for LandmarkNet {
    fn detect(&self, x: &Tensor) -> Result<Tensor> {
        let map = self.trunk.forward(x)?.silu()?;
        let b = map.dim(0)?;
        let flat = map.flatten_from(1)?;
        let raw = self.head.forward(&flat)?;
        Ok(candle_nn::ops::sigmoid(&raw)?.reshape((b, self.keypoints, 2))?)
    }
}

/// Keypoints of one image in normalized `(x, y)` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Splits a `[B, K, 2]` detector output into per-image sets.
    pub fn from_batch(t: &Tensor) -> Result<Vec<LandmarkSet>> {
        let (_, k, two) = t.dims3()?;
        if two != 2 {
            return Err(shape_err(format!("keypoint tensor last axis {two}, expected 2")));
        }
        let flat = crate::tensor::to_f64_vec(t)?;
        Ok(flat
            .chunks(2 * k)
            .map(|img| LandmarkSet {
                points: img.chunks(2).map(|p| [p[0], p[1]]).collect(),
            })
            .collect())
    }

    pub fn mean_error(&self, other: &LandmarkSet) -> f64 {
        let n = self.points.len().min(other.points.len()).max(1);
        self.points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .sum::<f64>()
            / n as f64
    }
}

/// The three extractors used to condition the denoiser.
#[derive(Debug, Clone)]
pub struct Conditioners {
    pub identity: IdentityExtractor,
    pub expression: ExpressionExtractor,
    pub landmarks: LandmarkNet,
}

impl Conditioners {
    pub fn bundle(&self, x_id: &Tensor, x0: &Tensor) -> Result<ConditionBundle> {
        let (id_vector, id_tokens) = self.identity.extract(x_id)?;
        let bundle = ConditionBundle {
            id_vector,
            id_tokens,
            exp_tokens: self.expression.extract(x0)?,
            lm_tokens: self.landmarks.features(x0)?,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}
