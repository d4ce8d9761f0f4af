//! Evaluation of trained models and the ablation harness: the four toggle rows
//! with every report column, plus aFID-vs-steps curves for the cycle pass on and
//! off across seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{AblationFlags, EvalConfig, RunConfig};
use crate::data::DatasetManifest;
use crate::diffusion::{NoiseSchedule, SampleOptions};
use crate::error::{Error, Result};
use crate::metrics::{afid, evaluate_generator, evaluation_subset, MetricReport, ModelGenerator, ReportContext};
use crate::model::CcfModel;
use crate::params::ParamStore;
use crate::trainer::{load_model, Trainer};

/// A test split held in memory, optionally capped.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub manifest: DatasetManifest,
    pub images: Tensor,
}

impl TestSet {
    pub fn from_manifest(manifest: &DatasetManifest, max_images: usize) -> Result<Self> {
        let manifest = evaluation_subset(manifest, max_images);
        let images = manifest.load_images(DType::F32, &Device::Cpu)?.into_tensor();
        Ok(Self { manifest, images })
    }

    pub fn load(path: &Path, max_images: usize) -> Result<Self> {
        let m = DatasetManifest::read(path)?;
        m.validate()?;
        Self::from_manifest(&m, max_images)
    }
}

fn generator<'a>(model: &'a CcfModel, sched: &'a NoiseSchedule, eval: &EvalConfig) -> ModelGenerator<'a> {
    ModelGenerator {
        model,
        schedule: sched,
        seed: eval.sample_seed,
        options: SampleOptions {
            clamp_x0: eval.clamp_x0,
        },
    }
}

pub fn model_afid(model: &CcfModel, sched: &NoiseSchedule, test: &TestSet, eval: &EvalConfig) -> Result<f64> {
    afid(
        &test.manifest,
        &test.images,
        &generator(model, sched, eval),
        &model.backbone,
        eval.pairing_seed,
    )
}

pub fn evaluate_model(
    model: &CcfModel,
    sched: &NoiseSchedule,
    test: &TestSet,
    eval: &EvalConfig,
    context: ReportContext,
) -> Result<MetricReport> {
    let report = evaluate_generator(
        &test.manifest,
        &test.images,
        &generator(model, sched, eval),
        &model.backbone,
        eval.pairing_seed,
        context,
    )?;
    report.validate()?;
    Ok(report)
}

/// Full report for a checkpoint directory on its configured test split.
pub fn evaluate_checkpoint(dir: &Path, data_root: Option<&Path>, max_images: Option<usize>) -> Result<MetricReport> {
    let (manifest, model) = load_model(dir)?;
    let mut config = manifest.config.clone();
    if let Some(root) = data_root {
        config.data.root = root.to_path_buf();
    }
    let test = TestSet::load(&config.data.test_path(), max_images.unwrap_or(config.eval.max_images))?;
    evaluate_model(
        &model,
        &config.schedule.build()?,
        &test,
        &config.eval,
        ReportContext {
            config_hash: manifest.config_hash.clone(),
            checkpoint_id: manifest.checkpoint_id.clone(),
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    /// Training seeds of the CD on/off curves.
    pub seeds: Vec<u64>,
    /// Test images per curve point (0 = all); the table always uses `eval.max_images`.
    pub curve_images: usize,
    /// Curve spacing; 0 takes `train.eval_every`, or a quarter of the run when that is 0 too.
    pub curve_every: u64,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            curve_images: 8,
            curve_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub flags: AblationFlags,
    pub report: MetricReport,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AfidCurve {
    pub cycle: bool,
    pub seed: u64,
    /// `(step, aFID)`.
    pub points: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveComparison {
    pub steps: Vec<u64>,
    pub cd_on_mean: Vec<f64>,
    pub cd_off_mean: Vec<f64>,
    /// Means over every curve point after step 0.
    pub cd_on_overall: f64,
    pub cd_off_overall: f64,
    /// Logged, never enforced.
    pub cycle_not_worse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
    pub curves: Vec<AfidCurve>,
    pub comparison: CurveComparison,
}

fn slug(flags: &AblationFlags) -> String {
    let b = |x: bool| if x { "1" } else { "0" };
    format!("lm{}-cf{}-cd{}", b(flags.landmarks), b(flags.cross_fusion), b(flags.cycle))
}

struct RunResult {
    checkpoint: PathBuf,
    curve: Vec<(u64, f64)>,
    trainer: Trainer,
}

fn train_run(config: RunConfig, preset: &ParamStore, curve_test: &TestSet, dir: &Path) -> Result<RunResult> {
    let sched = config.schedule.build()?;
    let eval = config.eval.clone();
    let mut trainer = Trainer::new(config, preset)?;
    let mut cb = |m: &CcfModel| model_afid(m, &sched, curve_test, &eval);
    let outcome = trainer.run(dir, Some(&mut cb))?;
    Ok(RunResult {
        checkpoint: outcome.checkpoint,
        curve: outcome.evals,
        trainer,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn compare(curves: &[AfidCurve]) -> Result<CurveComparison> {
    let steps: Vec<u64> = curves
        .first()
        .ok_or_else(|| Error::Config("no curves".into()))?
        .points
        .iter()
        .map(|p| p.0)
        .collect();
    if curves.iter().any(|c| c.points.iter().map(|p| p.0).ne(steps.iter().copied())) {
        return Err(Error::Metric("curves were evaluated at different steps".into()));
    }
    let side = |cycle: bool| -> Vec<f64> {
        (0..steps.len())
            .map(|i| mean(curves.iter().filter(|c| c.cycle == cycle).map(|c| c.points[i].1)))
            .collect()
    };
    let on = side(true);
    let off = side(false);
    let overall = |v: &[f64]| mean(steps.iter().zip(v).filter(|(s, _)| **s > 0).map(|(_, x)| *x));
    let (a, b) = (overall(&on), overall(&off));
    Ok(CurveComparison {
        steps,
        cd_on_mean: on,
        cd_off_mean: off,
        cd_on_overall: a,
        cd_off_overall: b,
        cycle_not_worse: a <= b,
    })
}

/// Trains and evaluates the four toggle rows at `base.train.seed`, then the CD
/// on/off pair at every further curve seed. Runs land under `out_dir`.
pub fn run_ablation(
    base: &RunConfig,
    preset: &ParamStore,
    settings: &AblationSettings,
    out_dir: &Path,
) -> Result<AblationReport> {
    base.validate()?;
    if settings.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one curve seed".into()));
    }
    let mut base = base.clone();
    if settings.curve_every > 0 {
        base.train.eval_every = settings.curve_every;
    } else if base.train.eval_every == 0 {
        base.train.eval_every = (base.train.steps / 4).max(1);
    }
    let test_manifest = DatasetManifest::read(&base.data.test_path())?;
    test_manifest.validate()?;
    let table_test = TestSet::from_manifest(&test_manifest, base.eval.max_images)?;
    let curve_test = TestSet::from_manifest(&test_manifest, settings.curve_images)?;
    fs::create_dir_all(out_dir)?;

    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for flags in AblationFlags::table_rows() {
        let mut cfg = base.clone();
        cfg.ablation = flags;
        let seed = cfg.train.seed;
        log::info!("ablation row {}", flags.label());
        let run = train_run(cfg.clone(), preset, &curve_test, &out_dir.join(slug(&flags)).join(format!("seed-{seed}")))?;
        let report = evaluate_model(
            run.trainer.model(),
            &cfg.schedule.build()?,
            &table_test,
            &cfg.eval,
            ReportContext {
                config_hash: cfg.hash(),
                checkpoint_id: crate::trainer::read_checkpoint_manifest(&run.checkpoint)?.checkpoint_id,
            },
        )?;
        if flags.landmarks && flags.cross_fusion && settings.seeds.contains(&seed) {
            curves.push(AfidCurve {
                cycle: flags.cycle,
                seed,
                points: run.curve,
            });
        }
        rows.push(AblationRow {
            label: flags.label(),
            flags,
            report,
            checkpoint: run.checkpoint,
        });
    }
    for &seed in settings.seeds.iter().filter(|s| **s != base.train.seed) {
        for cycle in [true, false] {
            let mut cfg = base.clone();
            cfg.ablation = AblationFlags { cycle, ..AblationFlags::full() };
            cfg.train.seed = seed;
            log::info!("curve run seed {seed} CD {}", if cycle { "on" } else { "off" });
            let run = train_run(cfg, preset, &curve_test, &out_dir.join("curves").join(format!("cd{}-seed-{seed}", u8::from(cycle))))?;
            curves.push(AfidCurve {
                cycle,
                seed,
                points: run.curve,
            });
        }
    }
    curves.sort_by_key(|c| (!c.cycle, c.seed));
    let comparison = compare(&curves)?;
    log::info!(
        "mean aFID after step 0: CD on {:.4}, CD off {:.4} (cycle not worse: {})",
        comparison.cd_on_overall,
        comparison.cd_off_overall,
        comparison.cycle_not_worse
    );
    let report = AblationReport {
        config_hash: base.hash(),
        rows,
        curves,
        comparison,
    };
    fs::write(out_dir.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(out_dir.join("table.md"), report.table())?;
    fs::write(out_dir.join("curves.csv"), report.curves_csv())?;
    Ok(report)
}

impl AblationReport {
    /// Markdown comparison table, one row per toggle setting.
    pub fn table(&self) -> String {
        let mut s = String::from("| LM | CF | CD |");
        let names = self.rows.first().map(|r| r.report.values().map(|(n, _)| n)).unwrap_or_default();
        for n in names {
            let _ = write!(s, " {n} |");
        }
        s.push_str("\n|---|---|---|");
        s.push_str(&"---|".repeat(names.len()));
        s.push('\n');
        let mark = |b: bool| if b { "✓" } else { "✗" };
        for r in &self.rows {
            let _ = write!(s, "| {} | {} | {} |", mark(r.flags.landmarks), mark(r.flags.cross_fusion), mark(r.flags.cycle));
            for (_, v) in r.report.values() {
                let _ = write!(s, " {v:.4} |");
            }
            s.push('\n');
        }
        s
    }

    /// `cycle,seed,step,afid` rows.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("cycle,seed,step,afid\n");
        for c in &self.curves {
            for (step, v) in &c.points {
                let _ = writeln!(s, "{},{},{step},{v}", u8::from(c.cycle), c.seed);
            }
        }
        s
    }

    /// The report with run locations removed, for comparing repeated runs.
    pub fn without_paths(&self) -> Self {
        let mut r = self.clone();
        for row in &mut r.rows {
            row.checkpoint = PathBuf::new();
        }
        r
    }
}
