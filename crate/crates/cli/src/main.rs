//! `cyclefuse` command line: dataset generation, pretraining, training,
//! synthesis, evaluation and the ablation sweep.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cyclefuse_core::config::{ModelConfig, RunConfig};
use cyclefuse_core::data::io::{read_png, write_png};
use cyclefuse_core::data::{generate_synthetic_dataset, DatasetManifest, DATA_ROOT_ENV};
use cyclefuse_core::diffusion::SampleOptions;
use cyclefuse_core::experiment::{evaluate_checkpoint, model_afid, run_ablation, AblationSettings, TestSet};
use cyclefuse_core::params::ParamStore;
use cyclefuse_core::pretrain::{pretrain_conditioners, PretrainConfig, PretrainedConditioners};
use cyclefuse_core::trainer::{latest_checkpoint, load_model, Trainer};
use cyclefuse_core::CcfModel;

#[derive(Parser)]
#[command(name = "cyclefuse", version, about = "Identity/expression/landmark-conditioned face diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic paired-face dataset with train/test manifests.
    GenData(GenDataArgs),
    /// Pretrain the identity, expression and landmark networks and the metric backbone.
    PretrainConditioners(PretrainArgs),
    /// Train the diffusion model with the cycle objective.
    Train(TrainArgs),
    /// Generate an image from an identity image and a style image.
    Synthesize(SynthesizeArgs),
    /// Compute the metric report for a checkpoint.
    Evaluate(EvaluateArgs),
    /// Train and evaluate the four toggle rows plus CD on/off curves.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    identities: usize,
    #[arg(long, default_value_t = 8)]
    expressions: usize,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelPreset {
    Desk,
    Tiny,
}

/// Run configuration: a TOML file, then flag overrides.
#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML); defaults to the desk configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model shape preset, ignored when a config file is given.
    #[arg(long, value_enum)]
    model: Option<ModelPreset>,
    /// Dataset directory holding the train/test manifests.
    #[arg(long, env = DATA_ROOT_ENV)]
    data: Option<PathBuf>,
    /// Directory written by `pretrain-conditioners`.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Diffusion horizon T.
    #[arg(long)]
    diffusion_steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Test images per evaluation (0 = all).
    #[arg(long)]
    max_images: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
}

impl RunArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => {
                let mut c = RunConfig::default();
                if let Some(ModelPreset::Tiny) = self.model {
                    c.model = ModelConfig::tiny();
                }
                c
            }
        };
        if let Some(d) = &self.data {
            cfg.data.root = d.clone();
        }
        macro_rules! set {
            ($($field:ident => $($target:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$field { cfg.$($target).+ = v; })*
            };
        }
        set!(
            steps => train.steps,
            batch_size => train.batch_size,
            lr => train.lr,
            seed => train.seed,
            diffusion_steps => schedule.steps,
            eval_every => train.eval_every,
            checkpoint_every => train.checkpoint_every,
            max_images => eval.max_images,
            sigma => weights.sigma,
            lambda => weights.lambda,
            gamma => weights.gamma,
        );
        cfg.validate()?;
        Ok(cfg)
    }

    fn preset(&self, model: &ModelConfig) -> Result<ParamStore> {
        match &self.pretrained {
            Some(dir) => Ok(PretrainedConditioners::load(dir)?.preset_for(model)?.clone()),
            None => {
                log::warn!("no --pretrained directory: conditioners start from random weights");
                Ok(ParamStore::new())
            }
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long, env = DATA_ROOT_ENV)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Run configuration whose model shape is pretrained for.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    model: ModelPreset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    identity_steps: Option<usize>,
    #[arg(long)]
    landmark_steps: Option<usize>,
    #[arg(long)]
    expression_steps: Option<usize>,
    #[arg(long)]
    backbone_steps: Option<usize>,
    #[arg(long)]
    pool_persons: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Run directory for logs and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Disable the landmark condition and loss.
    #[arg(long)]
    no_lm: bool,
    /// Replace cross-fusion by plain concatenation.
    #[arg(long)]
    no_cf: bool,
    /// Disable the second (cycle) diffusion pass.
    #[arg(long)]
    no_cd: bool,
    /// Continue from the latest checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct SynthesizeArgs {
    /// Checkpoint directory, or a run directory (its latest checkpoint is used).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Identity source image.
    #[arg(long = "id")]
    id_image: PathBuf,
    /// Expression (style) source image.
    #[arg(long = "style")]
    style_image: PathBuf,
    /// Output PNG: identity | style | generated, side by side.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint directory, or a run directory (its latest checkpoint is used).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = DATA_ROOT_ENV)]
    data: Option<PathBuf>,
    #[arg(long)]
    max_images: Option<usize>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out: PathBuf,
    /// Curve seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Test images per curve point (0 = all).
    #[arg(long, default_value_t = 8)]
    curve_images: usize,
    #[arg(long, default_value_t = 0)]
    curve_every: u64,
}

fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join("manifest.json").exists() {
        Ok(path.to_path_buf())
    } else {
        Ok(latest_checkpoint(path)?)
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let g = generate_synthetic_dataset(a.identities, a.expressions, a.resolution, a.seed, &a.out)?;
    println!(
        "wrote {} train and {} test images ({} and {} persons) to {}",
        g.train.len(),
        g.test.len(),
        g.train.persons().len(),
        g.test.persons().len(),
        a.out.display()
    );
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let model = match (&a.config, a.model) {
        (Some(p), _) => RunConfig::load(p)?.model,
        (None, ModelPreset::Desk) => ModelConfig::desk(),
        (None, ModelPreset::Tiny) => ModelConfig::tiny(),
    };
    let mut cfg = PretrainConfig {
        seed: a.seed,
        ..Default::default()
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(identity_steps, landmark_steps, expression_steps, backbone_steps, pool_persons);
    let train = DatasetManifest::read(&a.data.join("train.jsonl"))?;
    train.validate()?;
    let test_path = a.data.join("test.jsonl");
    let test = if test_path.exists() {
        Some(DatasetManifest::read(&test_path)?)
    } else {
        None
    };
    let pre = pretrain_conditioners(&model, &train, test.as_ref(), &cfg)?;
    pre.save(&a.out)?;
    println!("{}", serde_json::to_string_pretty(&pre.report)?);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut trainer = if a.resume {
        let ckpt = latest_checkpoint(&a.out)?;
        log::info!("resuming from {}", ckpt.display());
        Trainer::resume(&ckpt, a.run.data.as_deref())?
    } else {
        let mut cfg = a.run.build()?;
        cfg.ablation.landmarks &= !a.no_lm;
        cfg.ablation.cross_fusion &= !a.no_cf;
        cfg.ablation.cycle &= !a.no_cd;
        let preset = a.run.preset(&cfg.model)?;
        Trainer::new(cfg, &preset)?
    };
    let cfg = trainer.config().clone();
    log::info!("training {} ({} steps), config {}", cfg.ablation.label(), cfg.train.steps, cfg.hash());
    let outcome = if cfg.train.eval_every > 0 {
        let test = TestSet::load(&cfg.data.test_path(), cfg.eval.max_images)?;
        let sched = cfg.schedule.build()?;
        let mut cb = |m: &CcfModel| model_afid(m, &sched, &test, &cfg.eval);
        trainer.run(&a.out, Some(&mut cb))?
    } else {
        trainer.run(&a.out, None)?
    };
    if let Some(last) = outcome.losses.last() {
        println!("final total loss {:.6} at step {}", last.total, trainer.current_step());
    }
    println!("checkpoint {}", outcome.checkpoint.display());
    Ok(())
}

fn synthesize(a: SynthesizeArgs) -> Result<()> {
    let (manifest, model) = load_model(&resolve_checkpoint(&a.checkpoint)?)?;
    let (dt, dev) = (model.dtype(), model.device().clone());
    let x_id = read_png(&a.id_image, dt, &dev)?.unsqueeze(0)?;
    let x_style = read_png(&a.style_image, dt, &dev)?.unsqueeze(0)?;
    let r = manifest.config.model.resolution;
    for (name, x) in [("identity", &x_id), ("style", &x_style)] {
        if x.dims()[2..] != [r, r] {
            bail!("{name} image is {:?}, the model expects {r}x{r}", &x.dims()[2..]);
        }
    }
    let sched = manifest.config.schedule.build()?;
    let opts = SampleOptions {
        clamp_x0: manifest.config.eval.clamp_x0,
    };
    let out = model.generate(&x_id, &x_style, &sched, a.seed, opts)?.clamp(-1.0, 1.0)?;
    let grid = candle_core::Tensor::cat(&[&x_id, &x_style, &out], 3)?.squeeze(0)?;
    write_png(&a.out, &grid)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let ckpt = resolve_checkpoint(&a.checkpoint)?;
    let report = evaluate_checkpoint(&ckpt, a.data.as_deref(), a.max_images)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(p) = &a.out {
        std::fs::write(p, &json)?;
    }
    println!("{json}");
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.run.build()?;
    let preset = a.run.preset(&cfg.model)?;
    let settings = AblationSettings {
        seeds: a.seeds,
        curve_images: a.curve_images,
        curve_every: a.curve_every,
    };
    let report = run_ablation(&cfg, &preset, &settings, &a.out)?;
    print!("{}", report.table());
    let c = &report.comparison;
    println!(
        "mean aFID over curve points after step 0: CD on {:.4}, CD off {:.4}; cycle not worse: {}",
        c.cd_on_overall, c.cd_off_overall, c.cycle_not_worse
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::PretrainConditioners(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Synthesize(a) => synthesize(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
