//! Pretraining of the conditioning networks and the metric backbone on
//! synthetic labels.
//!
//! * identity classifier — person labels of the training split; initializes the
//!   trainable identity extractor and provides the frozen identity twin and the
//!   identity-loss embedding;
//! * landmark network — regression on analytic keypoints of a pool of freshly
//!   generated faces;
//! * expression face encoder — expression labels of the training split, with
//!   the identity twin frozen so the deviation map carries the expression;
//! * metric backbone — a second identity classifier with its own seed.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{linear, Linear, Module, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioners::{
    map_to_tokens, Encoder, EncoderConfig, IdentityEmbedder, IdentityExtractor, KeypointDetector, LandmarkNet,
    LandmarkSet, TOKEN_COUNT,
};
use crate::config::ModelConfig;
use crate::data::synth::{sample_face, EXPRESSIONS, KEYPOINTS};
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::init::{sorted_vars, SeededInit};
use crate::model::backbone_config;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{load_store, rename_prefix, save_store, snapshot, ParamStore};

const POOL_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub identity_steps: usize,
    pub landmark_steps: usize,
    pub expression_steps: usize,
    pub backbone_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Generated persons in the landmark pool (eight expressions each).
    pub pool_persons: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            identity_steps: 300,
            landmark_steps: 800,
            expression_steps: 600,
            backbone_steps: 300,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            pool_persons: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub identity_train_accuracy: f64,
    pub expression_train_accuracy: f64,
    pub backbone_train_accuracy: f64,
    /// Mean Euclidean keypoint error in normalized units.
    pub landmark_error_train: f64,
    pub landmark_error_test: f64,
    pub final_losses: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PretrainMeta {
    model: ModelConfig,
    config: PretrainConfig,
    report: PretrainReport,
}

/// Pretrained parameters, namespaced by model segment.
pub struct PretrainedConditioners {
    pub params: ParamStore,
    pub model: ModelConfig,
    pub config: PretrainConfig,
    pub report: PretrainReport,
}

impl PretrainedConditioners {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_store(&self.params, &dir.join("conditioners.safetensors"))?;
        let meta = PretrainMeta {
            model: self.model.clone(),
            config: self.config.clone(),
            report: self.report.clone(),
        };
        fs::write(dir.join("pretrain.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: PretrainMeta = serde_json::from_str(
            &fs::read_to_string(dir.join("pretrain.json"))
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?,
        )?;
        Ok(Self {
            params: load_store(&dir.join("conditioners.safetensors"), &Device::Cpu)?,
            model: meta.model,
            config: meta.config,
            report: meta.report,
        })
    }

    /// Parameters for [`crate::CcfModel::new`], checked against `model`.
    pub fn preset_for(&self, model: &ModelConfig) -> Result<&ParamStore> {
        if &self.model != model {
            return Err(Error::Config("pretrained conditioners were built for another model configuration".into()));
        }
        Ok(&self.params)
    }
}

/// `K` of the 68 generator keypoints, evenly spaced; all of them when `K = 68`.
pub fn keypoint_subset(k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > KEYPOINTS {
        return Err(Error::Config(format!("keypoint count {k} outside 1..={KEYPOINTS}")));
    }
    Ok((0..k).map(|i| i * KEYPOINTS / k).collect())
}

fn landmark_tensor(sets: &[LandmarkSet], subset: &[usize], dtype: DType) -> Result<Tensor> {
    let mut v = Vec::with_capacity(sets.len() * subset.len() * 2);
    for s in sets {
        for &i in subset {
            v.extend_from_slice(&s.points[i]);
        }
    }
    Ok(Tensor::from_vec(v, (sets.len(), subset.len(), 2), &Device::Cpu)?.to_dtype(dtype)?)
}

struct Pool {
    images: Tensor,
    landmarks: Tensor,
}

fn generate_pool(persons: usize, resolution: usize, seed: u64, subset: &[usize]) -> Result<Pool> {
    let pool_seed = seed ^ POOL_SALT;
    let mut imgs = Vec::new();
    let mut sets = Vec::new();
    for p in 0..persons {
        for e in 0..EXPRESSIONS.len() {
            let spec = sample_face(pool_seed, p, e);
            let px: Vec<f32> = spec.render(resolution).into_iter().map(|v| (2.0 * v - 1.0) as f32).collect();
            imgs.push(Tensor::from_vec(px, (3, resolution, resolution), &Device::Cpu)?);
            sets.push(spec.landmarks());
        }
    }
    Ok(Pool {
        images: Tensor::stack(&imgs, 0)?,
        landmarks: landmark_tensor(&sets, subset, DType::F32)?,
    })
}

fn pick(t: &Tensor, idx: &[u32]) -> Result<Tensor> {
    Ok(t.index_select(&Tensor::new(idx, t.device())?, 0)?)
}

/// Minibatch AdamW on `loss(batch_indices)`; returns the last loss.
fn fit(
    vars: Vec<(String, Var)>,
    steps: usize,
    n: usize,
    cfg: &PretrainConfig,
    salt: u64,
    loss: impl Fn(&[u32]) -> Result<Tensor>,
) -> Result<f64> {
    let mut opt = AdamW::new(vars, AdamWConfig::new(cfg.lr, 0.0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt);
    let mut last = f64::NAN;
    for step in 0..steps {
        let idx: Vec<u32> = (0..cfg.batch_size).map(|_| rng.random_range(0..n as u32)).collect();
        let l = loss(&idx)?;
        last = l.to_scalar::<f32>()? as f64;
        if !last.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step as u64,
                detail: "pretraining".into(),
            });
        }
        opt.step(&l.backward()?)?;
    }
    Ok(last)
}

fn accuracy(logits: &Tensor, labels: &Tensor) -> Result<f64> {
    let pred = logits.argmax(D::Minus1)?;
    let hits = pred.eq(labels)?.to_dtype(DType::F32)?.mean_all()?.to_scalar::<f32>()?;
    Ok(hits as f64)
}

fn batched<T>(x: &Tensor, f: impl Fn(&Tensor) -> Result<T>) -> Result<Vec<T>> {
    let n = x.dim(0)?;
    (0..n).step_by(64).map(|s| f(&x.narrow(0, s, 64.min(n - s))?)).collect()
}

struct Classifier {
    net: IdentityExtractor,
    cls: Linear,
}

impl Classifier {
    fn new(enc: EncoderConfig, classes: usize, vb: &VarBuilder, name: &str, head: &str) -> Result<Self> {
        Ok(Self {
            net: IdentityExtractor::new(enc, vb.pp(name))?,
            cls: linear(enc.dim, classes, vb.pp(head))?,
        })
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.cls.forward(&self.net.embed_identity(x)?.silu()?)?)
    }
}

fn train_classifier(
    enc: EncoderConfig,
    images: &Tensor,
    labels: &Tensor,
    classes: usize,
    steps: usize,
    cfg: &PretrainConfig,
    name: &str,
    salt: u64,
) -> Result<(ParamStore, f64, f64)> {
    let vm = VarMap::new();
    let vb = SeededInit::builder(&vm, cfg.seed ^ salt, DType::F32, &Device::Cpu);
    let head = format!("{name}_cls");
    let c = Classifier::new(enc, classes, &vb, name, &head)?;
    let n = images.dim(0)?;
    let last = fit(sorted_vars(&vm), steps, n, cfg, salt, |idx| {
        let logits = c.logits(&pick(images, idx)?)?;
        Ok(candle_nn::loss::cross_entropy(&logits, &pick(labels, idx)?)?)
    })?;
    let logits = Tensor::cat(&batched(images, |x| c.logits(x))?, 0)?;
    let acc = accuracy(&logits, labels)?;
    let store = snapshot(&vm)?
        .into_iter()
        .filter(|(k, _)| !k.starts_with(&head))
        .collect();
    Ok((store, acc, last))
}

fn person_labels(manifest: &DatasetManifest) -> Result<(Tensor, usize)> {
    let persons = manifest.persons();
    let labels: Vec<u32> = manifest
        .entries
        .iter()
        .map(|e| persons.binary_search(&e.person_id).expect("person listed") as u32)
        .collect();
    Ok((Tensor::new(labels, &Device::Cpu)?, persons.len()))
}

/// Mean keypoint error of `detector` on images with known keypoints.
pub fn landmark_error(detector: &dyn KeypointDetector, images: &Tensor, truth: &[LandmarkSet], subset: &[usize]) -> Result<f64> {
    let pred = Tensor::cat(&batched(images, |x| detector.detect(x))?, 0)?;
    let sets = LandmarkSet::from_batch(&pred)?;
    if sets.len() != truth.len() {
        return Err(Error::Metric("prediction and ground-truth counts differ".into()));
    }
    let total: f64 = sets
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let t = LandmarkSet {
                points: subset.iter().map(|&i| t.points[i]).collect(),
            };
            p.mean_error(&t)
        })
        .sum();
    Ok(total / sets.len() as f64)
}

/// Keypoint regression on a generated pool; parameters are namespaced `lm.*`.
pub fn train_landmark_net(model: &ModelConfig, cfg: &PretrainConfig) -> Result<(LandmarkNet, ParamStore, f64)> {
    let enc = EncoderConfig::from_model(model);
    let subset = keypoint_subset(model.keypoints)?;
    log::info!("generating a pool of {} faces", cfg.pool_persons * EXPRESSIONS.len());
    let pool = generate_pool(cfg.pool_persons.max(1), model.resolution, cfg.seed, &subset)?;
    let vm = VarMap::new();
    let vb = SeededInit::builder(&vm, cfg.seed ^ 0x1a, DType::F32, &Device::Cpu);
    let lm = LandmarkNet::new(enc, model.keypoints, vb.pp("lm"))?;
    let last = fit(sorted_vars(&vm), cfg.landmark_steps, pool.images.dim(0)?, cfg, 0x1a, |idx| {
        let pred = lm.detect(&pick(&pool.images, idx)?)?;
        Ok((pred - pick(&pool.landmarks, idx)?)?.sqr()?.mean_all()?)
    })?;
    Ok((lm, snapshot(&vm)?, last))
}

/// Runs all four pretraining stages.
pub fn pretrain_conditioners(
    model: &ModelConfig,
    train: &DatasetManifest,
    test: Option<&DatasetManifest>,
    cfg: &PretrainConfig,
) -> Result<PretrainedConditioners> {
    model.validate()?;
    let enc = EncoderConfig::from_model(model);
    let subset = keypoint_subset(model.keypoints)?;
    let train_images = train.load_images(DType::F32, &Device::Cpu)?.into_tensor();
    let res = model.resolution;
    if train_images.dims()[1..] != [model.image_channels, res, res] {
        return Err(Error::Config(format!(
            "dataset images {:?} do not match the {res}x{res} model",
            train_images.dims()
        )));
    }
    let (persons, n_persons) = person_labels(train)?;
    let mut params = ParamStore::new();

    log::info!("pretraining identity classifier on {n_persons} persons");
    let (id_store, id_acc, id_loss) =
        train_classifier(enc, &train_images, &persons, n_persons, cfg.identity_steps, cfg, "id", 0x1d)?;
    params.extend(id_store.clone());
    params.extend(rename_prefix(&id_store, "id", "id_feature"));
    params.extend(rename_prefix(&id_store, "id.encoder", "exp_id"));

    log::info!("pretraining metric backbone");
    let (bb_store, bb_acc, bb_loss) = train_classifier(
        backbone_config(model),
        &train_images,
        &persons,
        n_persons,
        cfg.backbone_steps,
        cfg,
        "eval_backbone",
        0xbb,
    )?;
    params.extend(bb_store);

    let (lm, lm_store, lm_loss) = train_landmark_net(model, cfg)?;
    params.extend(lm_store);
    let lm_train = landmark_error(&lm, &train_images, &train.load_landmarks()?, &subset)?;
    let lm_test = match test {
        Some(t) => landmark_error(
            &lm,
            &t.load_images(DType::F32, &Device::Cpu)?.into_tensor(),
            &t.load_landmarks()?,
            &subset,
        )?,
        None => f64::NAN,
    };

    log::info!("pretraining expression face encoder");
    let id_twin = Encoder::new(
        enc,
        VarBuilder::from_tensors(
            rename_prefix(&id_store, "id.encoder", "").into_iter().collect(),
            DType::F32,
            &Device::Cpu,
        ),
    )?;
    let ex_vm = VarMap::new();
    let ex_vb = SeededInit::builder(&ex_vm, cfg.seed ^ 0xe0, DType::F32, &Device::Cpu);
    let face = Encoder::new(enc, ex_vb.pp("exp_face").pp("encoder"))?;
    let align = candle_nn::conv2d(enc.dim, enc.dim, 1, Default::default(), ex_vb.pp("exp_face").pp("align"))?;
    let head = linear(TOKEN_COUNT * enc.dim, EXPRESSIONS.len(), ex_vb.pp("exp_cls"))?;
    let exp_logits = |x: &Tensor| -> Result<Tensor> {
        let dev = (face.forward(x)? - id_twin.forward(x)?)?;
        let tokens = map_to_tokens(&align.forward(&dev)?)?;
        Ok(head.forward(&tokens.flatten_from(1)?)?)
    };
    let expressions = Tensor::new(
        train
            .entries
            .iter()
            .map(|e| e.expression_id % EXPRESSIONS.len() as u32)
            .collect::<Vec<_>>(),
        &Device::Cpu,
    )?;
    let ex_loss = fit(sorted_vars(&ex_vm), cfg.expression_steps, train.len(), cfg, 0xe0, |idx| {
        let logits = exp_logits(&pick(&train_images, idx)?)?;
        Ok(candle_nn::loss::cross_entropy(&logits, &pick(&expressions, idx)?)?)
    })?;
    let ex_acc = accuracy(&Tensor::cat(&batched(&train_images, exp_logits)?, 0)?, &expressions)?;
    params.extend(snapshot(&ex_vm)?.into_iter().filter(|(k, _)| !k.starts_with("exp_cls")));

    let report = PretrainReport {
        identity_train_accuracy: id_acc,
        expression_train_accuracy: ex_acc,
        backbone_train_accuracy: bb_acc,
        landmark_error_train: lm_train,
        landmark_error_test: lm_test,
        final_losses: [id_loss, lm_loss, ex_loss, bb_loss],
    };
    log::info!("pretraining done: {report:?}");
    Ok(PretrainedConditioners {
        params,
        model: model.clone(),
        config: cfg.clone(),
        report,
    })
}
