//! Cycle-diffusion training: the two-pass step, the optimization loop,
//! checkpoints and the metrics log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batch::ImageBatch;
use crate::conditioners::{IdentityEmbedder, KeypointDetector};
use crate::config::{AblationFlags, LossWeights, RunConfig};
use crate::data::{make_pairs, DatasetManifest, PairStream, TrainingPair};
use crate::denoiser::ConditionedDenoiser;
use crate::diffusion::{q_sample, recover_x0, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::losses::{identity_loss_from_features, landmark_loss_from_points, loss_mse};
use crate::model::CcfModel;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{load_segments, load_store, save_segments, save_store, sha256_file, ParamStore, SegmentInfo};
use crate::tensor::{randn, scalar};

pub const CHECKPOINT_FORMAT: &str = "cyclefuse-checkpoint/1";
const STEP_RNG_SALT: u64 = 0x7a11_c0de_0000_0002;

/// Scalar losses of one step. `first`, `second` and `total` are composed from the
/// parts in `f64`, so the identities below hold exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse1: f64,
    pub id1: f64,
    pub lm1: f64,
    pub first: f64,
    pub mse2: f64,
    pub id2: f64,
    pub lm2: f64,
    pub second: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(w: LossWeights, pass1: [f64; 3], pass2: [f64; 3]) -> Self {
        let first = pass1[0] + w.lambda * pass1[1] + w.gamma * pass1[2];
        let second = pass2[0] + w.lambda * pass2[1] + w.gamma * pass2[2];
        Self {
            mse1: pass1[0],
            id1: pass1[1],
            lm1: pass1[2],
            first,
            mse2: pass2[0],
            id2: pass2[1],
            lm2: pass2[2],
            second,
            total: first + w.sigma * second,
        }
    }

    /// Exact check of the decomposition under the effective weights `w`.
    pub fn identities_hold(&self, w: LossWeights) -> bool {
        self.first == self.mse1 + w.lambda * self.id1 + w.gamma * self.lm1
            && self.second == self.mse2 + w.lambda * self.id2 + w.gamma * self.lm2
            && self.total == self.first + w.sigma * self.second
    }

    pub fn is_finite(&self) -> bool {
        [
            self.mse1, self.id1, self.lm1, self.first, self.mse2, self.id2, self.lm2, self.second, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Points in a step at which tensors can be observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Noisy,
    EpsPred,
    X0Hat,
    SecondPassStart,
    SecondNoisy,
    SecondEpsPred,
    SecondX0Hat,
}

/// Read-only hook into a step, for audits and diagnostics.
pub trait StepProbe {
    fn observe(&mut self, stage: Stage, tensor: &Tensor);
}

pub struct NoProbe;

impl StepProbe for NoProbe {
    fn observe(&mut self, _: Stage, _: &Tensor) {}
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleSettings {
    pub weights: LossWeights,
    pub flags: AblationFlags,
    pub stop_grad_x0: bool,
}

impl CycleSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            weights: cfg.weights,
            flags: cfg.ablation,
            stop_grad_x0: cfg.train.stop_grad_x0,
        }
    }

    pub fn effective_weights(&self) -> LossWeights {
        self.flags.effective(self.weights)
    }
}

/// Inputs of one step with noise and timesteps already drawn.
pub struct CycleBatch<'a> {
    pub x_id: &'a Tensor,
    pub x0: &'a Tensor,
    pub eps: &'a Tensor,
    pub t: &'a [usize],
}

pub struct CycleNets<'a> {
    pub eps_model: &'a dyn NoisePredictor,
    pub detector: &'a dyn KeypointDetector,
    pub feature: &'a dyn IdentityEmbedder,
}

pub struct CycleOutput {
    pub breakdown: LossBreakdown,
    /// Differentiable total loss.
    pub total: Tensor,
}

fn weighted(w: LossWeights, mse: &Tensor, id: &Tensor, lm: Option<&Tensor>) -> Result<Tensor> {
    let mut sum = (mse + (id * w.lambda)?)?;
    if let Some(lm) = lm {
        sum = (sum + (lm * w.gamma)?)?;
    }
    Ok(sum)
}

fn value(t: Option<&Tensor>) -> Result<f64> {
    t.map(scalar).transpose().map(|v| v.unwrap_or(0.0))
}

/// The losses of one cycle-diffusion step.
///
/// Pass 1 noises `x0` with `(ε, t)`, predicts the noise and recovers x̂₀. Pass 2
/// re-noises x̂₀ with the same `(ε, t)`, predicts again with the same network and
/// recovers x̂₀′. Identity and landmark targets are always the original `x_id`/`x0`;
/// their features are computed once, before either pass.
pub fn cycle_losses(
    batch: &CycleBatch,
    nets: &CycleNets,
    sched: &NoiseSchedule,
    settings: &CycleSettings,
    probe: &mut dyn StepProbe,
) -> Result<CycleOutput> {
    let w = settings.effective_weights();
    let flags = settings.flags;
    let steps = sched.steps();
    let (eps, t) = (batch.eps, batch.t);

    let f_id = nets.feature.embed_identity(batch.x_id)?;
    let f_ref = nets.feature.embed_identity(batch.x0)?;
    let lm_ref = if flags.landmarks {
        Some(nets.detector.detect(batch.x0)?)
    } else {
        None
    };
    let pass = |x_start: &Tensor, probe: &mut dyn StepProbe, stages: [Stage; 3]| -> Result<[Option<Tensor>; 4]> {
        let x_t = q_sample(x_start, t, eps, sched)?;
        probe.observe(stages[0], &x_t);
        let eps_pred = nets.eps_model.predict_noise(&x_t, t)?;
        probe.observe(stages[1], &eps_pred);
        let mse = loss_mse(eps, &eps_pred)?;
        let x0_hat = recover_x0(&x_t, t, &eps_pred, sched)?;
        probe.observe(stages[2], &x0_hat);
        let id = identity_loss_from_features(&f_id, &f_ref, &nets.feature.embed_identity(&x0_hat)?, t, steps)?;
        let lm = match &lm_ref {
            Some(target) => Some(landmark_loss_from_points(&nets.detector.detect(&x0_hat)?, target)?),
            None => None,
        };
        Ok([Some(mse), Some(id), lm, Some(x0_hat)])
    };

    let [mse1, id1, lm1, x0_hat] = pass(batch.x0, probe, [Stage::Noisy, Stage::EpsPred, Stage::X0Hat])?;
    let (mse1, id1, x0_hat) = (mse1.unwrap(), id1.unwrap(), x0_hat.unwrap());
    let first = weighted(w, &mse1, &id1, lm1.as_ref())?;
    let pass1 = [scalar(&mse1)?, scalar(&id1)?, value(lm1.as_ref())?];

    let (total, pass2) = if flags.cycle {
        probe.observe(Stage::SecondPassStart, &x0_hat);
        let start = if settings.stop_grad_x0 { x0_hat.detach() } else { x0_hat };
        let [mse2, id2, lm2, _] = pass(
            &start,
            probe,
            [Stage::SecondNoisy, Stage::SecondEpsPred, Stage::SecondX0Hat],
        )?;
        let (mse2, id2) = (mse2.unwrap(), id2.unwrap());
        let second = weighted(w, &mse2, &id2, lm2.as_ref())?;
        let total = (first + (second * w.sigma)?)?;
        (total, [scalar(&mse2)?, scalar(&id2)?, value(lm2.as_ref())?])
    } else {
        (first, [0.0; 3])
    };
    Ok(CycleOutput {
        breakdown: LossBreakdown::compose(w, pass1, pass2),
        total,
    })
}

/// Draws `ε ~ N(0, I)` then `t ~ Uniform{0..T−1}` per item, in that order.
pub fn draw_noise_and_steps(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    sched: &NoiseSchedule,
    dtype: DType,
    device: &Device,
) -> Result<(Tensor, Vec<usize>)> {
    let eps = randn(rng, shape, dtype, device)?;
    let t = (0..shape[0]).map(|_| rng.random_range(0..sched.steps())).collect();
    Ok((eps, t))
}

/// One forward evaluation of the training objective on `model`.
pub fn train_step(
    model: &CcfModel,
    x_id: &Tensor,
    x0: &Tensor,
    sched: &NoiseSchedule,
    settings: &CycleSettings,
    rng: &mut ChaCha8Rng,
    probe: &mut dyn StepProbe,
) -> Result<CycleOutput> {
    if FusionMode::from(settings.flags) != model.mode() {
        return Err(Error::Config("ablation flags disagree with the model's fusion mode".into()));
    }
    let (eps, t) = draw_noise_and_steps(rng, x0.dims(), sched, model.dtype(), model.device())?;
    let bundle = model.bundle(x_id, x0)?;
    let fused = model.fuse(&bundle)?;
    let eps_model = ConditionedDenoiser {
        net: &model.denoiser,
        fused: &fused,
        id_vector: &bundle.id_vector,
    };
    let nets = CycleNets {
        eps_model: &eps_model,
        detector: &model.conditioners.landmarks,
        feature: &model.id_feature,
    };
    let batch = CycleBatch {
        x_id,
        x0,
        eps: &eps,
        t: &t,
    };
    cycle_losses(&batch, &nets, sched, settings, probe)
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Step {
        step: u64,
        mse1: f64,
        id1: f64,
        lm1: f64,
        mse2: f64,
        id2: f64,
        lm2: f64,
        total: f64,
    },
    Eval {
        step: u64,
        afid: f64,
    },
}

impl LogRecord {
    pub fn step(step: u64, b: &LossBreakdown) -> Self {
        Self::Step {
            step,
            mse1: b.mse1,
            id1: b.id1,
            lm1: b.lm1,
            mse2: b.mse2,
            id2: b.id2,
            lm2: b.lm2,
            total: b.total,
        }
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn append_log(path: &Path, record: &LogRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    serde_json::to_writer(&mut f, record)?;
    f.write_all(b"\n")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub step: u64,
    pub checkpoint_id: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub segments: Vec<SegmentInfo>,
    pub optimizer: SegmentInfo,
    pub optimizer_steps: u64,
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    step: u64,
    rng: ChaCha8Rng,
    pairs: PairStream,
}

pub fn checkpoint_dir(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(format!("step-{step}"))
}

/// Most advanced `step-N` directory of a run.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(run_dir)? {
        let path = entry?.path();
        let n = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step-"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(n) = n {
            if path.join("manifest.json").is_file() && best.as_ref().is_none_or(|(b, _)| n > *b) {
                best = Some((n, path));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::Checkpoint(format!("no checkpoint under {}", run_dir.display())))
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", m.format)));
    }
    Ok(m)
}

/// Loads the model stored in a checkpoint directory.
pub fn load_model(dir: &Path) -> Result<(CheckpointManifest, CcfModel)> {
    let manifest = read_checkpoint_manifest(dir)?;
    let params = load_segments(dir, &manifest.segments, &Device::Cpu)?;
    let model = CcfModel::from_params(&manifest.config.model, manifest.config.ablation.into(), &params, &Device::Cpu)?;
    Ok((manifest, model))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub losses: Vec<LossBreakdown>,
    pub evals: Vec<(u64, f64)>,
}

pub struct Trainer {
    config: RunConfig,
    model: CcfModel,
    opt: AdamW,
    sched: NoiseSchedule,
    rng: ChaCha8Rng,
    pairs: PairStream,
    manifest: DatasetManifest,
    images: ImageBatch,
    step: u64,
}

impl Trainer {
    /// Loads the training split named by `config.data` and builds a fresh model,
    /// taking any parameters present in `preset`.
    pub fn new(config: RunConfig, preset: &ParamStore) -> Result<Self> {
        config.validate()?;
        let manifest = DatasetManifest::read(&config.data.train_path())?;
        manifest.validate()?;
        let images = manifest.load_images(DType::F32, &Device::Cpu)?;
        let res = config.model.resolution;
        if images.tensor().dims()[1..] != [config.model.image_channels, res, res] {
            return Err(Error::Config(format!(
                "dataset images {:?} do not match the model's {res}x{res} input",
                images.tensor().dims()
            )));
        }
        let seed = config.train.seed;
        let model = CcfModel::new(&config.model, config.ablation.into(), seed, preset, DType::F32, &Device::Cpu)?;
        let opt = AdamW::new(
            model.trainable_vars(),
            AdamWConfig::new(config.train.lr, config.train.weight_decay),
        )?;
        Ok(Self {
            sched: config.schedule.build()?,
            rng: ChaCha8Rng::seed_from_u64(seed ^ STEP_RNG_SALT),
            pairs: make_pairs(&manifest, seed)?,
            config,
            model,
            opt,
            manifest,
            images,
            step: 0,
        })
    }

    /// Continues from a checkpoint; `data_root` overrides the stored dataset location.
    pub fn resume(dir: &Path, data_root: Option<&Path>) -> Result<Self> {
        let manifest = read_checkpoint_manifest(dir)?;
        let mut config = manifest.config.clone();
        if let Some(root) = data_root {
            config.data.root = root.to_path_buf();
        }
        let params = load_segments(dir, &manifest.segments, &Device::Cpu)?;
        let mut trainer = Self::new(config, &params)?;
        let opt_path = dir.join(&manifest.optimizer.file);
        if sha256_file(&opt_path)? != manifest.optimizer.sha256 {
            return Err(Error::Checkpoint("optimizer state fails its checksum".into()));
        }
        trainer.opt.load_state(&load_store(&opt_path, &Device::Cpu)?, manifest.optimizer_steps)?;
        let state: TrainerState = serde_json::from_str(&fs::read_to_string(dir.join("state.json"))?)?;
        if state.step != manifest.step {
            return Err(Error::Checkpoint("state and manifest disagree on the step".into()));
        }
        trainer.step = state.step;
        trainer.rng = state.rng;
        trainer.pairs = state.pairs;
        Ok(trainer)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &CcfModel {
        &self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn current_step(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self) -> Result<LossBreakdown> {
        self.step_with_probe(&mut NoProbe)
    }

    pub fn step_with_probe(&mut self, probe: &mut dyn StepProbe) -> Result<LossBreakdown> {
        let idx = self.pairs.next_batch(self.config.train.batch_size);
        let pair = TrainingPair::gather(&self.images, &self.manifest, &idx)?;
        let settings = CycleSettings::from_config(&self.config);
        let out = train_step(&self.model, &pair.x_id, &pair.x0, &self.sched, &settings, &mut self.rng, probe)?;
        let b = out.breakdown;
        if !b.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("{b:?}"),
            });
        }
        let grads = out.total.backward()?;
        self.opt.step(&grads)?;
        self.step += 1;
        Ok(b)
    }

    /// Writes `{run_dir}/step-{N}/` and returns its path.
    pub fn save_checkpoint(&self, run_dir: &Path) -> Result<PathBuf> {
        let dir = checkpoint_dir(run_dir, self.step);
        let tmp = run_dir.join(format!(".step-{}.partial", self.step));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        let segments = save_segments(&self.model.params()?, &tmp)?;
        let opt_file = "optimizer.safetensors".to_string();
        let state = self.opt.state();
        save_store(&state, &tmp.join(&opt_file))?;
        let optimizer = SegmentInfo {
            name: "optimizer".into(),
            sha256: sha256_file(&tmp.join(&opt_file))?,
            file: opt_file,
            tensors: state.len(),
        };
        let ts = TrainerState {
            step: self.step,
            rng: self.rng.clone(),
            pairs: self.pairs.clone(),
        };
        fs::write(tmp.join("state.json"), serde_json::to_string(&ts)?)?;
        let mut h = Sha256::new();
        for s in &segments {
            h.update(s.sha256.as_bytes());
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            step: self.step,
            checkpoint_id: hex::encode(&h.finalize()[..8]),
            config_hash: self.config.hash(),
            config: self.config.clone(),
            segments,
            optimizer,
            optimizer_steps: self.opt.steps(),
        };
        fs::write(tmp.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::rename(&tmp, &dir)?;
        Ok(dir)
    }

    /// Trains until `config.train.steps`, logging every step to `{run_dir}/metrics.jsonl`.
    /// `evaluate` supplies aFID at each `eval_every` boundary.
    pub fn run(
        &mut self,
        run_dir: &Path,
        mut evaluate: Option<&mut dyn FnMut(&CcfModel) -> Result<f64>>,
    ) -> Result<TrainOutcome> {
        fs::create_dir_all(run_dir)?;
        fs::write(run_dir.join("config.toml"), self.config.to_toml_string()?)?;
        let log = run_dir.join("metrics.jsonl");
        let tc = self.config.train.clone();
        let mut losses = Vec::new();
        let mut evals = Vec::new();
        let mut record_eval = |this: &Self, evals: &mut Vec<(u64, f64)>| -> Result<()> {
            if let Some(f) = evaluate.as_mut() {
                let afid = f(&this.model)?;
                append_log(&log, &LogRecord::Eval { step: this.step, afid })?;
                log::info!("step {} aFID {afid:.4}", this.step);
                evals.push((this.step, afid));
            }
            Ok(())
        };
        if tc.eval_every > 0 && self.step == 0 {
            record_eval(self, &mut evals)?;
        }
        while self.step < tc.steps {
            let b = self.step()?;
            append_log(&log, &LogRecord::step(self.step, &b))?;
            if self.step % 10 == 0 || self.step == 1 {
                log::info!("step {} total {:.5} (first {:.5}, second {:.5})", self.step, b.total, b.first, b.second);
            }
            losses.push(b);
            if tc.eval_every > 0 && self.step % tc.eval_every == 0 {
                record_eval(self, &mut evals)?;
            }
            if tc.checkpoint_every > 0 && self.step % tc.checkpoint_every == 0 && self.step < tc.steps {
                self.save_checkpoint(run_dir)?;
            }
        }
        let checkpoint = self.save_checkpoint(run_dir)?;
        Ok(TrainOutcome {
            checkpoint,
            losses,
            evals,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::generate_synthetic_dataset;
    use crate::tensor::to_f64_vec;
    use candle_core::{TensorId, Var};
    use std::cell::RefCell;

    fn tiny_model(flags: AblationFlags) -> CcfModel {
        CcfModel::new(&ModelConfig::tiny(), flags.into(), 11, &ParamStore::new(), DType::F64, &Device::Cpu).unwrap()
    }

    fn images(seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = randn(&mut rng, &[2, 3, 16, 16], DType::F64, &Device::Cpu).unwrap();
        let b = randn(&mut rng, &[2, 3, 16, 16], DType::F64, &Device::Cpu).unwrap();
        ((a * 0.5).unwrap(), (b * 0.5).unwrap())
    }

    fn settings(weights: LossWeights, flags: AblationFlags) -> CycleSettings {
        CycleSettings {
            weights,
            flags,
            stop_grad_x0: false,
        }
    }

    fn run_step(model: &CcfModel, s: &CycleSettings, seed: u64) -> LossBreakdown {
        let (x_id, x0) = images(seed);
        let sched = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        train_step(model, &x_id, &x0, &sched, s, &mut rng, &mut NoProbe).unwrap().breakdown
    }

    #[test]
    fn breakdown_identities_and_weight_cases() {
        let m = tiny_model(AblationFlags::full());
        let w = LossWeights::default();
        let b = run_step(&m, &settings(w, AblationFlags::full()), 1);
        assert!(b.identities_hold(w));
        assert!(b.mse2 > 0.0 && b.lm2 > 0.0);

        let no_second = LossWeights { sigma: 0.0, ..w };
        let b0 = run_step(&m, &settings(no_second, AblationFlags::full()), 1);
        assert_eq!(b0.total, b0.first);
        assert_eq!(b0.first, b.first);

        let mse_only = LossWeights {
            lambda: 0.0,
            gamma: 0.0,
            sigma: 1.0,
        };
        let bm = run_step(&m, &settings(mse_only, AblationFlags::full()), 1);
        assert_eq!(bm.total, bm.mse1 + bm.mse2);
    }

    #[test]
    fn cycle_off_skips_the_second_pass() {
        let flags = AblationFlags {
            cycle: false,
            ..AblationFlags::full()
        };
        let m = tiny_model(flags);
        let b = run_step(&m, &settings(LossWeights::default(), flags), 2);
        assert_eq!([b.mse2, b.id2, b.lm2, b.second], [0.0; 4]);
        assert_eq!(b.total, b.first);
    }

    #[test]
    fn landmark_off_zeroes_the_landmark_terms() {
        let flags = AblationFlags {
            landmarks: false,
            ..AblationFlags::full()
        };
        let m = tiny_model(flags);
        let b = run_step(&m, &settings(LossWeights::default(), flags), 2);
        assert_eq!([b.lm1, b.lm2], [0.0; 2]);
        assert!(b.identities_hold(flags.effective(LossWeights::default())));
        let full = tiny_model(AblationFlags::full());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x_id, x0) = images(0);
        let sched = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let s = settings(LossWeights::default(), flags);
        assert!(train_step(&full, &x_id, &x0, &sched, &s, &mut rng, &mut NoProbe).is_err());
    }

    type CallLog = RefCell<Vec<(&'static str, TensorId)>>;

    struct Audit<'a> {
        calls: &'a CallLog,
        stages: Vec<(Stage, TensorId, Tensor)>,
    }

    impl<'a> Audit<'a> {
        fn new(calls: &'a CallLog) -> Self {
            Self { calls, stages: Vec::new() }
        }
    }

    impl StepProbe for Audit<'_> {
        fn observe(&mut self, stage: Stage, t: &Tensor) {
            self.stages.push((stage, t.id(), t.clone()));
            let name = if stage == Stage::SecondPassStart { "second" } else { "stage" };
            self.calls.borrow_mut().push((name, t.id()));
        }
    }

    struct Recording<'a, T: ?Sized> {
        inner: &'a T,
        name: &'static str,
        log: &'a RefCell<Vec<(&'static str, TensorId)>>,
    }

    impl KeypointDetector for Recording<'_, dyn KeypointDetector + '_> {
        fn detect(&self, x: &Tensor) -> Result<Tensor> {
            self.log.borrow_mut().push((self.name, x.id()));
            self.inner.detect(x)
        }
    }

    impl IdentityEmbedder for Recording<'_, dyn IdentityEmbedder + '_> {
        fn embed_identity(&self, x: &Tensor) -> Result<Tensor> {
            self.log.borrow_mut().push((self.name, x.id()));
            self.inner.embed_identity(x)
        }
    }

    #[test]
    fn second_loss_targets_are_the_original_images() {
        let m = tiny_model(AblationFlags::full());
        let (x_id, x0) = images(3);
        let sched = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (eps, t) = draw_noise_and_steps(&mut rng, x0.dims(), &sched, DType::F64, &Device::Cpu).unwrap();
        let bundle = m.bundle(&x_id, &x0).unwrap();
        let fused = m.fuse(&bundle).unwrap();
        let net_calls = RefCell::new(Vec::new());
        let eps_model = |x: &Tensor, t: &[usize]| {
            net_calls.borrow_mut().push(std::ptr::from_ref(&m.denoiser) as usize);
            m.denoiser.predict_noise(x, t, &fused, &bundle.id_vector)
        };
        let log = CallLog::default();
        let mut audit = Audit::new(&log);
        let detector: &dyn KeypointDetector = &m.conditioners.landmarks;
        let feature: &dyn IdentityEmbedder = &m.id_feature;
        let det = Recording {
            inner: detector,
            name: "D",
            log: &log,
        };
        let feat = Recording {
            inner: feature,
            name: "F",
            log: &log,
        };
        let nets = CycleNets {
            eps_model: &eps_model,
            detector: &det,
            feature: &feat,
        };
        let batch = CycleBatch {
            x_id: &x_id,
            x0: &x0,
            eps: &eps,
            t: &t,
        };
        let s = settings(LossWeights::default(), AblationFlags::full());
        cycle_losses(&batch, &nets, &sched, &s, &mut audit).unwrap();

        let id_of = |stage: Stage| audit.stages.iter().find(|s| s.0 == stage).unwrap().1;
        let (hat, hat2) = (id_of(Stage::X0Hat), id_of(Stage::SecondX0Hat));
        let calls = log.borrow().clone();
        let split = calls.iter().position(|c| c.0 == "second").unwrap();
        let net = |c: &&(&str, TensorId)| c.0 == "D" || c.0 == "F";
        // Before the passes: targets from x_id and x0 only.
        let targets: Vec<_> = calls.iter().take_while(|c| c.0 != "stage").collect();
        assert_eq!(targets.len(), 3);
        assert!(targets.iter().all(|c| c.1 == x_id.id() || c.1 == x0.id()));
        // The second pass evaluates D and F on x̂₀′ only, never on x̂₀ or new targets.
        let second: Vec<_> = calls[split..].iter().filter(net).collect();
        assert_eq!(second.len(), 2);
        assert!(second.iter().all(|c| c.1 == hat2));
        assert!(calls[..split].iter().filter(net).all(|c| c.1 != hat2));
        assert_eq!(calls.iter().filter(net).filter(|c| c.1 == hat).count(), 2);
        // ε′ comes from the same network object, called once per pass.
        let nc = net_calls.borrow();
        assert_eq!(nc.len(), 2);
        assert_eq!(nc[0], nc[1]);
    }

    #[test]
    fn second_noising_reuses_noise_and_steps() {
        let m = tiny_model(AblationFlags::full());
        let (x_id, x0) = images(4);
        let sched = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let log = CallLog::default();
        let mut audit = Audit::new(&log);
        let s = settings(LossWeights::default(), AblationFlags::full());
        train_step(&m, &x_id, &x0, &sched, &s, &mut rng, &mut audit).unwrap();
        let mut replay = ChaCha8Rng::seed_from_u64(4);
        let (eps, t) = draw_noise_and_steps(&mut replay, x0.dims(), &sched, DType::F64, &Device::Cpu).unwrap();
        let get = |stage: Stage| audit.stages.iter().find(|s| s.0 == stage).unwrap().2.clone();
        let expect = q_sample(&get(Stage::X0Hat), &t, &eps, &sched).unwrap();
        assert_eq!(crate::tensor::max_abs_diff(&expect, &get(Stage::SecondNoisy)).unwrap(), 0.0);
        let first = q_sample(&x0, &t, &eps, &sched).unwrap();
        assert_eq!(crate::tensor::max_abs_diff(&first, &get(Stage::Noisy)).unwrap(), 0.0);
    }

    /// Algorithm 1 written out in plain f64 arithmetic; networks are the only shared code.
    fn straight_line(model: &CcfModel, x_id: &Tensor, x0: &Tensor, sched_steps: usize, seed: u64, w: LossWeights) -> [f64; 3] {
        let sched = NoiseSchedule::linear(sched_steps, 1e-3, 0.2).unwrap();
        let dims = x0.dims().to_vec();
        let (b, per) = (dims[0], dims[1..].iter().product::<usize>());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<f64> = {
            use rand_distr::StandardNormal;
            (0..b * per).map(|_| rng.sample(StandardNormal)).collect()
        };
        let t: Vec<usize> = (0..b).map(|_| rng.random_range(0..sched_steps)).collect();
        let mut ab = vec![1.0; sched_steps];
        let mut acc = 1.0;
        for (i, beta) in sched.betas().iter().enumerate() {
            acc *= 1.0 - beta;
            ab[i] = acc;
        }
        let to_t = |v: &[f64]| Tensor::from_vec(v.to_vec(), dims.as_slice(), &Device::Cpu).unwrap();
        let x0v = to_f64_vec(x0).unwrap();

        let bundle = model.bundle(x_id, x0).unwrap();
        let fused = model.fuse(&bundle).unwrap();
        let eps_net = |x: &[f64]| to_f64_vec(&model.denoiser.predict_noise(&to_t(x), &t, &fused, &bundle.id_vector).unwrap()).unwrap();
        let feat = |x: &Tensor| -> Vec<Vec<f64>> {
            let f = model.id_feature.embed_identity(x).unwrap();
            f.to_vec2::<f64>().unwrap()
        };
        let points = |x: &Tensor| to_f64_vec(&model.conditioners.landmarks.detect(x).unwrap()).unwrap();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
            dot / (na * nb)
        };
        let (f_id, f_ref, p_ref) = (feat(x_id), feat(x0), points(x0));

        let pass = |start: &[f64]| -> ([f64; 3], Vec<f64>) {
            let mut xt = vec![0.0; b * per];
            for i in 0..b {
                let (s, n) = (ab[t[i]].sqrt(), (1.0 - ab[t[i]]).sqrt());
                for j in 0..per {
                    xt[i * per + j] = s * start[i * per + j] + n * eps[i * per + j];
                }
            }
            let ep = eps_net(&xt);
            let mse = ep.iter().zip(&eps).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (b * per) as f64;
            let mut hat = vec![0.0; b * per];
            for i in 0..b {
                let (s, n) = (ab[t[i]].sqrt(), (1.0 - ab[t[i]]).sqrt());
                for j in 0..per {
                    hat[i * per + j] = (xt[i * per + j] - n * ep[i * per + j]) / s;
                }
            }
            let hat_t = to_t(&hat);
            let f_hat = feat(&hat_t);
            let mut id = 0.0;
            for i in 0..b {
                let wt = t[i] as f64 / sched_steps as f64;
                id -= wt * cos(&f_id[i], &f_hat[i]) + (1.0 - wt) * cos(&f_ref[i], &f_hat[i]);
            }
            id /= b as f64;
            let p_hat = points(&hat_t);
            let lm = p_hat.iter().zip(&p_ref).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p_hat.len() as f64;
            ([mse, id, lm], hat)
        };
        let (l1, hat) = pass(&x0v);
        let (l2, _) = pass(&hat);
        let first = l1[0] + w.lambda * l1[1] + w.gamma * l1[2];
        let second = l2[0] + w.lambda * l2[1] + w.gamma * l2[2];
        [first, second, first + w.sigma * second]
    }

    #[test]
    fn matches_straight_line_oracle() {
        let m = tiny_model(AblationFlags::full());
        let (x_id, x0) = images(5);
        let w = LossWeights::default();
        let got = run_step(&m, &settings(w, AblationFlags::full()), 5);
        let want = straight_line(&m, &x_id, &x0, 20, 5, w);
        for (g, e) in [got.first, got.second, got.total].into_iter().zip(want) {
            assert!((g - e).abs() < 1e-5, "{g} vs {e}");
        }
    }

    struct LinearDetector(Tensor);
    impl KeypointDetector for LinearDetector {
        fn detect(&self, x: &Tensor) -> Result<Tensor> {
            let b = x.dim(0)?;
            Ok(x.flatten_from(1)?.matmul(&self.0)?.reshape((b, 1, 2))?)
        }
    }

    struct LinearFeature(Tensor, Tensor);
    impl IdentityEmbedder for LinearFeature {
        fn embed_identity(&self, x: &Tensor) -> Result<Tensor> {
            Ok(x.flatten_from(1)?.matmul(&self.0)?.broadcast_add(&self.1)?)
        }
    }

    #[test]
    fn total_loss_gradient_matches_central_differences() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut r = |dims: &[usize]| randn(&mut rng, dims, DType::F64, &dev).unwrap();
        let w = Var::from_tensor(&r(&[2, 2])).unwrap();
        let bias = Var::from_tensor(&r(&[2])).unwrap();
        let detector = LinearDetector(r(&[2, 2]));
        let feature = LinearFeature(r(&[2, 3]), r(&[3]));
        let x_id = r(&[3, 1, 1, 2]);
        let x0 = r(&[3, 1, 1, 2]);
        let eps = r(&[3, 1, 1, 2]);
        let t = [1usize, 5, 9];
        let sched = NoiseSchedule::linear(10, 1e-2, 0.3).unwrap();
        for stop in [false, true] {
            let s = CycleSettings {
                stop_grad_x0: stop,
                ..settings(LossWeights::default(), AblationFlags::full())
            };
            let total = || {
                let eps_model = |x: &Tensor, _: &[usize]| -> Result<Tensor> {
                    let b = x.dim(0)?;
                    Ok(x.flatten_from(1)?.matmul(w.as_tensor())?.broadcast_add(bias.as_tensor())?.reshape((b, 1, 1, 2))?)
                };
                let nets = CycleNets {
                    eps_model: &eps_model,
                    detector: &detector,
                    feature: &feature,
                };
                let batch = CycleBatch {
                    x_id: &x_id,
                    x0: &x0,
                    eps: &eps,
                    t: &t,
                };
                cycle_losses(&batch, &nets, &sched, &s, &mut NoProbe).unwrap()
            };
            let out = total();
            let grads = out.total.backward().unwrap();
            for var in [&w, &bias] {
                let analytic = to_f64_vec(grads.get(var.as_tensor()).unwrap()).unwrap();
                let base = to_f64_vec(var.as_tensor()).unwrap();
                let shape = var.as_tensor().shape().clone();
                for i in 0..base.len() {
                    let h = 1e-6;
                    let eval = |delta: f64| {
                        let mut v = base.clone();
                        v[i] += delta;
                        var.set(&Tensor::from_vec(v, shape.clone(), &dev).unwrap()).unwrap();
                        total().breakdown.total
                    };
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    var.set(&Tensor::from_vec(base.clone(), shape.clone(), &dev).unwrap()).unwrap();
                    if stop {
                        // Detaching x̂₀ removes a path, so only the no-stop gradient must match the full objective.
                        continue;
                    }
                    let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
                    assert!(rel < 1e-4, "param {i}: analytic {} numeric {numeric}", analytic[i]);
                }
            }
        }
    }

    #[test]
    fn stop_gradient_changes_gradients_but_not_values() {
        let m = tiny_model(AblationFlags::full());
        let (x_id, x0) = images(6);
        let sched = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let grad_of = |stop: bool| {
            let s = CycleSettings {
                stop_grad_x0: stop,
                ..settings(LossWeights::default(), AblationFlags::full())
            };
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let out = train_step(&m, &x_id, &x0, &sched, &s, &mut rng, &mut NoProbe).unwrap();
            let g = out.total.backward().unwrap();
            let (_, var) = m.trainable_vars().into_iter().find(|(k, _)| k.starts_with("denoiser.conv_in")).unwrap();
            (out.breakdown, g.get(var.as_tensor()).unwrap().clone())
        };
        let (b1, g1) = grad_of(false);
        let (b2, g2) = grad_of(true);
        assert_eq!(b1, b2);
        assert!(crate::tensor::max_abs_diff(&g1, &g2).unwrap() > 0.0);
    }

    fn tiny_run_config(root: &Path, flags: AblationFlags) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig::tiny();
        cfg.schedule.steps = 20;
        cfg.ablation = flags;
        cfg.train.steps = 6;
        cfg.train.batch_size = 2;
        cfg.train.lr = 1e-3;
        cfg.data.root = root.to_path_buf();
        cfg
    }

    #[test]
    fn resume_reproduces_the_next_step_bitwise() {
        let data = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(4, 3, 16, 1, data.path()).unwrap();
        let run = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config(data.path(), AblationFlags::full());
        let mut a = Trainer::new(cfg, &ParamStore::new()).unwrap();
        for _ in 0..3 {
            a.step().unwrap();
        }
        let ckpt = a.save_checkpoint(run.path()).unwrap();
        assert_eq!(ckpt, run.path().join("step-3"));
        let next_a = a.step().unwrap();
        let mut b = Trainer::resume(&ckpt, None).unwrap();
        assert_eq!(b.current_step(), 3);
        let next_b = b.step().unwrap();
        assert_eq!(next_a, next_b);
        let (pa, pb) = (a.model().params().unwrap(), b.model().params().unwrap());
        for (k, t) in &pa {
            assert_eq!(crate::tensor::max_abs_diff(t, &pb[k]).unwrap(), 0.0, "{k}");
        }
        let (manifest, loaded) = load_model(&ckpt).unwrap();
        assert_eq!(manifest.step, 3);
        assert_eq!(loaded.params().unwrap().len(), pa.len());
        assert_eq!(latest_checkpoint(run.path()).unwrap(), ckpt);
    }

    #[test]
    fn run_logs_every_step_and_evaluation() {
        let data = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(4, 3, 16, 1, data.path()).unwrap();
        let run = tempfile::tempdir().unwrap();
        let flags = AblationFlags {
            cycle: false,
            ..AblationFlags::full()
        };
        let mut cfg = tiny_run_config(data.path(), flags);
        cfg.train.eval_every = 3;
        cfg.train.checkpoint_every = 2;
        let mut t = Trainer::new(cfg, &ParamStore::new()).unwrap();
        let mut calls = 0;
        let mut eval = |_: &CcfModel| -> Result<f64> {
            calls += 1;
            Ok(calls as f64)
        };
        let out = t.run(run.path(), Some(&mut eval)).unwrap();
        assert_eq!(out.losses.len(), 6);
        assert_eq!(out.evals, vec![(0, 1.0), (3, 2.0), (6, 3.0)]);
        let log = read_log(&run.path().join("metrics.jsonl")).unwrap();
        assert_eq!(log.len(), 9);
        for r in &log {
            if let LogRecord::Step { mse2, id2, lm2, .. } = r {
                assert_eq!([*mse2, *id2, *lm2], [0.0; 3]);
            }
        }
        for s in [2, 4, 6] {
            assert!(checkpoint_dir(run.path(), s).join("manifest.json").is_file());
        }
        assert!(run.path().join("config.toml").is_file());
    }
}
