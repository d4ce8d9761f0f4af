//! The assembled model with its parameters split into a trainable and a frozen set.
//!
//! Trainable (segments `id`, `fusion`, `denoiser`): the identity extractor, the
//! cross-fusion projections and the U-Net. Frozen (segments `exp_face`, `exp_id`,
//! `lm`, `id_feature`, `eval_backbone`): the expression twins, the landmark
//! network, the identity embedding used by the identity loss, and the feature
//! network used by the metrics. Frozen modules are built from plain tensors, so
//! backpropagation never allocates gradients for them.

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};

use crate::conditioners::{
    ConditionBundle, Conditioners, Encoder, EncoderConfig, ExpressionExtractor, IdentityExtractor, LandmarkNet,
};
use crate::config::ModelConfig;
use crate::denoiser::{ConditionedDenoiser, Denoiser};
use crate::diffusion::{sample, NoiseSchedule, SampleOptions};
use crate::error::{Error, Result};
use crate::fusion::{CrossFusion, FusedTokens, FusionMode};
use crate::init::{sorted_vars, SeededInit};
use crate::params::{assign, preload, segment_of, snapshot, ParamStore};

pub const TRAINABLE_SEGMENTS: [&str; 3] = ["id", "fusion", "denoiser"];
pub const FROZEN_SEGMENTS: [&str; 5] = ["exp_face", "exp_id", "lm", "id_feature", "eval_backbone"];

/// Feature width of the metric backbone.
pub const BACKBONE_DIM: usize = 64;

const FROZEN_SALT: u64 = 0x5eed_f002_e000_0001;

pub fn backbone_config(cfg: &ModelConfig) -> EncoderConfig {
    EncoderConfig {
        dim: BACKBONE_DIM,
        ..EncoderConfig::from_model(cfg)
    }
}

struct FrozenParts {
    expression: ExpressionExtractor,
    landmarks: LandmarkNet,
    id_feature: IdentityExtractor,
    backbone: IdentityExtractor,
}

fn frozen_parts(cfg: &ModelConfig, vb: &VarBuilder) -> Result<FrozenParts> {
    let enc = EncoderConfig::from_model(cfg);
    let expression = ExpressionExtractor::from_parts(
        Encoder::new(enc, vb.pp("exp_face").pp("encoder"))?,
        Encoder::new(enc, vb.pp("exp_id"))?,
        vb.pp("exp_face").pp("align"),
    )?;
    Ok(FrozenParts {
        expression,
        landmarks: LandmarkNet::new(enc, cfg.keypoints, vb.pp("lm"))?,
        id_feature: IdentityExtractor::new(enc, vb.pp("id_feature"))?,
        backbone: IdentityExtractor::new(backbone_config(cfg), vb.pp("eval_backbone"))?,
    })
}

/// Every parameter name of a model with this configuration.
pub fn parameter_names(cfg: &ModelConfig, dtype: DType, device: &Device) -> Result<BTreeSet<String>> {
    let vm = VarMap::new();
    let vb = SeededInit::builder(&vm, 0, dtype, device);
    IdentityExtractor::new(EncoderConfig::from_model(cfg), vb.pp("id"))?;
    CrossFusion::new(cfg.token_dim, cfg.fusion_heads, vb.pp("fusion"))?;
    Denoiser::new(cfg, vb.pp("denoiser"))?;
    frozen_parts(cfg, &vb)?;
    Ok(sorted_vars(&vm).into_iter().map(|(k, _)| k).collect())
}

fn select(store: &ParamStore, segments: &[&str]) -> ParamStore {
    store
        .iter()
        .filter(|(k, _)| segments.contains(&segment_of(k)))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

pub struct CcfModel {
    config: ModelConfig,
    mode: FusionMode,
    dtype: DType,
    device: Device,
    trainable: VarMap,
    frozen: ParamStore,
    pub conditioners: Conditioners,
    pub fusion: CrossFusion,
    pub denoiser: Denoiser,
    /// Frozen identity embedding F used by the identity consistency loss.
    pub id_feature: IdentityExtractor,
    /// Frozen feature network for FID and perceptual distances.
    pub backbone: IdentityExtractor,
}

impl CcfModel {
    /// Parameters found in `preset` are used as given; the rest are drawn from `seed`.
    pub fn new(
        config: &ModelConfig,
        mode: FusionMode,
        seed: u64,
        preset: &ParamStore,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        config.validate()?;
        let enc = EncoderConfig::from_model(config);

        let trainable = VarMap::new();
        preload(&trainable, &select(preset, &TRAINABLE_SEGMENTS), dtype)?;
        let vb = SeededInit::builder(&trainable, seed, dtype, device);
        let identity = IdentityExtractor::new(enc, vb.pp("id"))?;
        let fusion = CrossFusion::new(config.token_dim, config.fusion_heads, vb.pp("fusion"))?;
        let denoiser = Denoiser::new(config, vb.pp("denoiser"))?;

        let scratch = VarMap::new();
        preload(&scratch, &select(preset, &FROZEN_SEGMENTS), dtype)?;
        frozen_parts(config, &SeededInit::builder(&scratch, seed ^ FROZEN_SALT, dtype, device))?;
        let frozen = snapshot(&scratch)?;
        let fvb = VarBuilder::from_tensors(frozen.clone().into_iter().collect(), dtype, device);
        let parts = frozen_parts(config, &fvb)?;

        let known = parameter_names(config, dtype, device)?;
        if let Some(k) = preset.keys().find(|k| !known.contains(*k)) {
            return Err(Error::Checkpoint(format!("parameter {k} does not belong to this model")));
        }

        Ok(Self {
            config: config.clone(),
            mode,
            dtype,
            device: device.clone(),
            trainable,
            frozen,
            conditioners: Conditioners {
                identity,
                expression: parts.expression,
                landmarks: parts.landmarks,
            },
            fusion,
            denoiser,
            id_feature: parts.id_feature,
            backbone: parts.backbone,
        })
    }

    /// Rebuilds a model from a complete parameter set.
    pub fn from_params(config: &ModelConfig, mode: FusionMode, params: &ParamStore, device: &Device) -> Result<Self> {
        let dtype = params.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
        let model = Self::new(config, mode, 0, params, dtype, device)?;
        let all = model.params()?;
        if let Some(k) = all.keys().find(|k| !params.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("parameter {k} missing from the stored set")));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Trainable variables sorted by name.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        sorted_vars(&self.trainable)
    }

    pub fn frozen_params(&self) -> &ParamStore {
        &self.frozen
    }

    /// Every parameter, trainable and frozen.
    pub fn params(&self) -> Result<ParamStore> {
        let mut all = snapshot(&self.trainable)?;
        all.extend(self.frozen.iter().map(|(k, v)| (k.clone(), v.clone())));
        Ok(all)
    }

    /// Overwrites trainable values from `store`, which may also hold frozen entries (ignored).
    pub fn load_trainable(&self, store: &ParamStore) -> Result<()> {
        assign(&self.trainable, &select(store, &TRAINABLE_SEGMENTS))
    }

    pub fn bundle(&self, x_id: &Tensor, x0: &Tensor) -> Result<ConditionBundle> {
        self.conditioners.bundle(x_id, x0)
    }

    pub fn fuse(&self, bundle: &ConditionBundle) -> Result<FusedTokens> {
        self.fusion.fuse(bundle, self.mode)
    }

    /// Samples faces with the identity of `x_id` and the expression of `x_style`.
    pub fn generate(
        &self,
        x_id: &Tensor,
        x_style: &Tensor,
        sched: &NoiseSchedule,
        seed: u64,
        opts: SampleOptions,
    ) -> Result<Tensor> {
        let bundle = self.bundle(x_id, x_style)?;
        let fused = self.fuse(&bundle)?;
        let eps = ConditionedDenoiser {
            net: &self.denoiser,
            fused: &fused,
            id_vector: &bundle.id_vector,
        };
        sample(&eps, sched, seed, x_style.dims(), opts, self.dtype, &self.device)
    }
}
