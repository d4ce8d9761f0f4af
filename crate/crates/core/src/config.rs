//! Run configuration, loaded from TOML.
//!
//! Every section has defaults, so a config file only needs the keys it
//! overrides:
//!
//! ```toml
//! [model]            # resolution, token_dim, encoder_width, keypoints, fusion_heads
//! [model.denoiser]   # base_channels, channel_mults, attention_resolutions, ...
//! [schedule]         # steps, beta_start, beta_end, kind
//! [weights]          # lambda, gamma, sigma
//! [ablation]         # landmarks, cross_fusion, cycle
//! [train]            # steps, batch_size, lr, weight_decay, seed, eval_every, ...
//! [data]             # root, train_manifest, test_manifest
//! [eval]             # pairing_seed, sample_seed, max_images, clamp_x0
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    /// Spatial sizes (pixels per side) at which cross-attention layers are inserted.
    pub attention_resolutions: Vec<usize>,
    /// Zero means `4 × base_channels`.
    pub time_embed_dim: usize,
    pub attention_heads: usize,
    pub norm_groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_mults: vec![1, 2],
            attention_resolutions: vec![16, 8],
            time_embed_dim: 0,
            attention_heads: 4,
            norm_groups: 8,
        }
    }
}

impl DenoiserConfig {
    pub fn time_dim(&self) -> usize {
        if self.time_embed_dim == 0 {
            4 * self.base_channels
        } else {
            self.time_embed_dim
        }
    }

    /// Resolutions visited by the U-Net: one per level, plus the bottleneck.
    pub fn resolutions(&self, input: usize) -> Vec<usize> {
        (0..=self.channel_mults.len()).map(|i| input >> i).collect()
    }

    pub fn validate(&self, input: usize) -> Result<()> {
        if self.base_channels == 0 || self.channel_mults.is_empty() {
            return Err(Error::Config("denoiser needs channels and at least one level".into()));
        }
        let levels = self.channel_mults.len() as u32;
        if input % (1usize << levels) != 0 {
            return Err(Error::Config(format!(
                "input size {input} is not divisible by 2^{levels}"
            )));
        }
        let res = self.resolutions(input);
        if let Some(r) = self.attention_resolutions.iter().find(|r| !res.contains(r)) {
            return Err(Error::Config(format!(
                "attention resolution {r} is not one of the U-Net resolutions {res:?}"
            )));
        }
        for m in &self.channel_mults {
            let ch = m * self.base_channels;
            if ch == 0 || ch % self.norm_groups != 0 || ch % self.attention_heads != 0 {
                return Err(Error::Config(format!(
                    "{ch} channels incompatible with {} groups / {} heads",
                    self.norm_groups, self.attention_heads
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub resolution: usize,
    pub image_channels: usize,
    /// Token dimension `d` shared by every condition stream.
    pub token_dim: usize,
    pub encoder_width: usize,
    pub keypoints: usize,
    pub fusion_heads: usize,
    pub denoiser: DenoiserConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            resolution: 32,
            image_channels: 3,
            token_dim: 64,
            encoder_width: 16,
            keypoints: 68,
            fusion_heads: 4,
            denoiser: DenoiserConfig::default(),
        }
    }

    /// Full-size shapes: 112-pixel faces, 512-wide tokens, 8 fusion heads.
    pub fn paper_shape() -> Self {
        Self {
            resolution: 112,
            image_channels: 3,
            token_dim: 512,
            encoder_width: 64,
            keypoints: 68,
            fusion_heads: 8,
            denoiser: DenoiserConfig {
                base_channels: 64,
                channel_mults: vec![1, 2, 2, 4],
                attention_resolutions: vec![14, 7],
                time_embed_dim: 0,
                attention_heads: 8,
                norm_groups: 32,
            },
        }
    }

    /// 16-pixel toy shapes for fast tests.
    pub fn tiny() -> Self {
        Self {
            resolution: 16,
            image_channels: 3,
            token_dim: 8,
            encoder_width: 4,
            keypoints: 4,
            fusion_heads: 2,
            denoiser: DenoiserConfig {
                base_channels: 8,
                channel_mults: vec![1, 2],
                attention_resolutions: vec![8, 4],
                time_embed_dim: 16,
                attention_heads: 2,
                norm_groups: 4,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0 || self.fusion_heads == 0 || self.token_dim % self.fusion_heads != 0 {
            return Err(Error::Config(format!(
                "fusion heads {} must divide token dim {}",
                self.fusion_heads, self.token_dim
            )));
        }
        if self.resolution < 7 || self.image_channels == 0 || self.keypoints == 0 {
            return Err(Error::Config("resolution must be at least 7 with nonzero channels and keypoints".into()));
        }
        self.denoiser.validate(self.resolution)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ScheduleConfig {
    /// 100 steps with the 1000-step range scaled by 10 so the final step is close to pure noise.
    pub fn desk() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            kind: ScheduleKind::Linear,
        }
    }

    pub fn full() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.steps, self.beta_start, self.beta_end, self.kind)
    }
}

/// Weights of the identity (λ), landmark (γ) and second-pass (σ) losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
    pub sigma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            gamma: 0.1,
            sigma: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma), ("sigma", self.sigma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Component toggles. All on is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub landmarks: bool,
    pub cross_fusion: bool,
    pub cycle: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::full()
    }
}

impl AblationFlags {
    pub fn full() -> Self {
        Self {
            landmarks: true,
            cross_fusion: true,
            cycle: true,
        }
    }

    /// The four rows compared by `ablate`, in table order.
    pub fn table_rows() -> [AblationFlags; 4] {
        let full = Self::full();
        [
            Self { landmarks: false, ..full },
            Self { cross_fusion: false, ..full },
            Self { cycle: false, ..full },
            full,
        ]
    }

    pub fn label(&self) -> String {
        let mark = |b: bool| if b { "on" } else { "off" };
        format!("LM={} CF={} CD={}", mark(self.landmarks), mark(self.cross_fusion), mark(self.cycle))
    }

    /// Weights after the toggles are applied: LM off zeroes γ, CD off zeroes σ.
    pub fn effective(&self, w: LossWeights) -> LossWeights {
        LossWeights {
            lambda: w.lambda,
            gamma: if self.landmarks { w.gamma } else { 0.0 },
            sigma: if self.cycle { w.sigma } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// aFID on the test split every this many steps; 0 disables.
    pub eval_every: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Detach x̂₀ before the second noising, so the second loss does not reach the first prediction.
    pub stop_grad_x0: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 4,
            lr: 1e-4,
            weight_decay: 1e-2,
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            stop_grad_x0: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    pub train_manifest: String,
    pub test_manifest: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            train_manifest: "train.jsonl".into(),
            test_manifest: "test.jsonl".into(),
        }
    }
}

impl DataConfig {
    pub fn train_path(&self) -> PathBuf {
        self.root.join(&self.train_manifest)
    }

    pub fn test_path(&self) -> PathBuf {
        self.root.join(&self.test_manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub pairing_seed: u64,
    pub sample_seed: u64,
    /// Cap on test images used per evaluation; 0 means all.
    pub max_images: usize,
    pub clamp_x0: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pairing_seed: 0,
            sample_seed: 1234,
            max_images: 0,
            clamp_x0: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub weights: LossWeights,
    pub ablation: AblationFlags,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.build()?;
        self.weights.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    /// Short stable digest of the serialized configuration.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(&digest[..8])
    }
}
