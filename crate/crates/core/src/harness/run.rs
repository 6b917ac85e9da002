//! End-to-end commands: train, sample, eval and bench over an output directory.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bench::{bench_heads, BenchReport};
use super::data::{ingest, Dataset, DatasetSpec};
use super::eval::{evaluate, EvalReport};
use super::metrics::MetricsLog;
use super::png::emit_png;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::PixNerd;
use crate::solver::{sample, SampleOptions, SampleOutput};
use crate::trainer::{StepMetrics, Trainer};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "PIXNERD_OUT";
pub const CHECKPOINT_FILE: &str = "checkpoint.pnrd";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
const LOCK_FILE: &str = ".pixnerd.lock";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Data(format!(
                "{} is locked by another process (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn load_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    let ds = ingest(&DatasetSpec::from_config(&cfg.data, &cfg.model))?;
    if !ds.skipped.is_empty() {
        log::warn!("{} unreadable files skipped", ds.skipped.len());
    }
    Ok(ds)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub dataset: Dataset,
    pub metrics: Vec<StepMetrics>,
    pub checkpoint: PathBuf,
}

/// Trains to `cfg.train.steps`, logging every step and writing checkpoints
/// into `out_dir`. With `resume`, training continues from that checkpoint.
pub fn train_run<F>(cfg: TrainConfig, out_dir: &Path, resume: Option<&Path>, force: bool, mut on_step: F) -> Result<TrainOutcome>
where
    F: FnMut(&StepMetrics),
{
    let _lock = OutputLock::acquire(out_dir)?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, cfg.canonical()).map_err(|e| Error::io(&cfg_path, e))?;
    let dataset = load_dataset(&cfg)?;
    let mut trainer = Trainer::new(cfg.clone(), DType::F32)?;
    if let Some(path) = resume {
        trainer.resume(path, force)?;
    }
    let mut log = MetricsLog::open(&out_dir.join(METRICS_FILE))?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    let every = cfg.train.checkpoint_every as u64;
    let mut metrics = Vec::new();
    for step in trainer.step() + 1..=cfg.train.steps as u64 {
        let batch = dataset.batch(step, cfg.train.batch_size)?;
        let m = trainer.train_step(&batch)?;
        log.append(&m)?;
        on_step(&m);
        metrics.push(m);
        if every > 0 && step % every == 0 {
            trainer.save(&checkpoint)?;
        }
    }
    trainer.save(&checkpoint)?;
    Ok(TrainOutcome {
        trainer,
        dataset,
        metrics,
        checkpoint,
    })
}

/// Loads a checkpoint and returns its trainer with the model used for
/// sampling (EMA weights unless `use_ema` is false).
pub fn load_model(checkpoint: &Path, use_ema: bool) -> Result<(Trainer, PixNerd)> {
    if !checkpoint.exists() {
        return Err(Error::Checkpoint(format!("checkpoint {} not found", checkpoint.display())));
    }
    let trainer = Trainer::load(checkpoint, DType::F32)?;
    let model = if use_ema { trainer.ema_model()? } else { trainer.model().clone() };
    Ok((trainer, model))
}

#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub labels: Vec<u32>,
    /// Output `(height, width)`; `None` means the training resolution.
    pub resolution: Option<(usize, usize)>,
    pub options: SampleOptions,
    pub seed: u64,
}

/// Samples, writes a PNG grid to `png` and, when `frames` is given, one PNG
/// per step of the clean-estimate trajectory.
pub fn sample_run(model: &PixNerd, req: &SampleRequest, png: &Path, frames: Option<&Path>) -> Result<SampleOutput> {
    let (h, w) = req.resolution.unwrap_or(model.native_resolution());
    let channels = model.backbone().config().channels;
    let mut opts = req.options.clone();
    opts.record_trajectory = frames.is_some();
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let out = sample(model, &req.labels, (channels, h, w), &opts, &mut rng)?;
    emit_png(&out.images, png, None)?;
    if let Some(dir) = frames {
        for (i, frame) in out.trajectory.iter().enumerate() {
            emit_png(&frame.clamp(-1.0, 1.0)?, &dir.join(format!("frame_{i:04}.png")), None)?;
        }
    }
    Ok(out)
}

pub fn eval_run(
    model: &PixNerd,
    dataset: &Dataset,
    resolution: Option<(usize, usize)>,
    options: &SampleOptions,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let res = resolution.unwrap_or(model.native_resolution());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (report, images) = evaluate(model, dataset, res, options, &mut rng)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
        let path = dir.join("eval.json");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        emit_png(&images, &dir.join("eval_samples.png"), None)?;
    }
    Ok(report)
}

pub fn bench_run(cfg: &TrainConfig, patch: usize, tokens: usize, batch: usize, repeats: usize, out_dir: Option<&Path>) -> Result<BenchReport> {
    let report = bench_heads(cfg, patch, tokens, batch, repeats)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
        let path = dir.join("bench.json");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}
