//! Training: flow-matching loss plus representation alignment, label dropout,
//! Adam updates, parameter EMA and checkpoints.
//!
//! All randomness of step `n` comes from a generator keyed by `(seed, n)`, so
//! a resumed run needs no saved generator state.

mod adam;
mod checkpoint;
mod repa;

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use repa::{repa_loss, FeatureTeacher, PrecomputedTeacher, Projector, RandomConvTeacher, COSINE_EPS};

use crate::config::TrainConfig;
use crate::error::{contract, Error, Result};
use crate::flow::{flow_loss, gaussian_noise, interpolate, TimestepSampler};
use crate::model::PixNerd;
use crate::ops::scalar;
use crate::params::ParamStore;

/// Clean images in `[-1, 1]` with their labels and dataset positions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<u32>,
    pub indices: Vec<usize>,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub flow_loss: f64,
    pub repa_loss: f64,
    pub grad_norm: f64,
    pub wallclock_ms: f64,
    #[serde(skip)]
    pub total_loss: f64,
}

impl StepMetrics {
    /// Equality ignoring wall-clock time.
    pub fn same_values(&self, other: &Self) -> bool {
        self.step == other.step
            && self.flow_loss.to_bits() == other.flow_loss.to_bits()
            && self.repa_loss.to_bits() == other.repa_loss.to_bits()
            && self.grad_norm.to_bits() == other.grad_norm.to_bits()
    }
}

/// Differentiable loss terms of one step.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub flow: Tensor,
    pub repa: Tensor,
    pub total: Tensor,
}

/// Generator for the randomness of training step `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Replaces each label by `null` with probability `p`.
pub fn dropout_labels<R: Rng + ?Sized>(labels: &[u32], p: f64, null: u32, rng: &mut R) -> Result<Vec<u32>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("label dropout must lie in [0, 1], got {p}")));
    }
    Ok(labels
        .iter()
        .map(|&l| if rng.random::<f64>() < p { null } else { l })
        .collect())
}

pub struct Trainer {
    cfg: TrainConfig,
    store: ParamStore,
    ema: ParamStore,
    model: PixNerd,
    projector: Projector,
    adam: Adam,
    teacher: Box<dyn FeatureTeacher>,
    sampler: TimestepSampler,
    step: u64,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("step", &self.step)
            .field("params", &self.store.num_elements())
            .finish()
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, dtype: DType) -> Result<Self> {
        let teacher = default_teacher(&cfg, dtype)?;
        Self::with_teacher(cfg, dtype, teacher)
    }

    pub fn with_teacher(cfg: TrainConfig, dtype: DType, teacher: Box<dyn FeatureTeacher>) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(dtype, cfg.train.seed);
        let model = PixNerd::new(&store, &cfg)?;
        let projector = Projector::new(
            &store.pp("repa"),
            cfg.model.hidden,
            cfg.repa.projector_hidden,
            teacher.dim(),
        )?;
        let ema = store.deep_clone()?;
        let adam = Adam::new(&store, &cfg.train)?;
        let sampler = TimestepSampler::new(cfg.flow.timestep, cfg.flow.loc, cfg.flow.scale)?;
        Ok(Self {
            cfg,
            store,
            ema,
            model,
            projector,
            adam,
            teacher,
            sampler,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn ema_store(&self) -> &ParamStore {
        &self.ema
    }

    pub fn model(&self) -> &PixNerd {
        &self.model
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    /// Model reading the EMA parameters.
    pub fn ema_model(&self) -> Result<PixNerd> {
        PixNerd::new(&self.ema, &self.cfg)
    }

    /// Loss terms for `batch` using the randomness of step `step`.
    pub fn loss_terms(&self, batch: &Batch, step: u64) -> Result<LossTerms> {
        let b = batch.labels.len();
        let dims = batch.images.dims().to_vec();
        contract!(dims.len() == 4 && dims[0] == b, "batch images {:?} for {b} labels", dims);
        contract!(batch.indices.len() == b, "{} indices for {b} images", batch.indices.len());
        let images = batch.images.to_dtype(self.store.dtype())?;
        let mut rng = step_rng(self.cfg.train.seed, step);
        let labels = dropout_labels(&batch.labels, self.cfg.train.label_dropout, self.model.backbone().null_label(), &mut rng)?;
        let times = self.sampler.sample(b, &mut rng);
        let eps = gaussian_noise(&dims, self.store.dtype(), &mut rng)?;
        let fs = interpolate(&images, &eps, &times)?;
        let out = self.model.forward(&fs.x_t, &times, &labels)?;
        let flow = flow_loss(&out.velocity, &fs)?;
        let weight = self.cfg.repa.weight;
        let (repa, total) = if weight > 0.0 {
            let grid = self.model.grid()?;
            let target = self.teacher.features(&images, &grid, &batch.indices)?.detach();
            let repa = repa_loss(&self.projector.forward(&out.tap_hidden)?, &target)?;
            let total = (&flow + (&repa * weight)?)?;
            (repa, total)
        } else {
            (flow.zeros_like()?, flow.clone())
        };
        Ok(LossTerms { flow, repa, total })
    }

    /// One optimizer update followed by the EMA update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let start = Instant::now();
        let step = self.step + 1;
        let terms = self.loss_terms(batch, step).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
            other => other,
        })?;
        let (flow, repa, total) = (scalar(&terms.flow)?, scalar(&terms.repa)?, scalar(&terms.total)?);
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}: flow={flow} repa={repa} total={total}"
            )));
        }
        let grads = terms.total.backward()?;
        let grad_norm = self.adam.step(&self.store, &grads).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {step}: {m} (flow={flow} repa={repa})")),
            other => other,
        })?;
        self.update_ema()?;
        self.step = step;
        Ok(StepMetrics {
            step,
            flow_loss: flow,
            repa_loss: repa,
            grad_norm,
            wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
            total_loss: total,
        })
    }

    fn update_ema(&self) -> Result<()> {
        let d = self.cfg.train.ema_decay;
        for (name, var) in self.store.vars() {
            let e = self.ema.var(&name).ok_or_else(|| Error::Contract(format!("no EMA slot for {name}")))?;
            let next = ((e.as_tensor() * d)? + (var.as_tensor() * (1.0 - d))?)?;
            e.set(&next)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = Vec::new();
        let vars = self.store.vars();
        for (name, var) in &vars {
            tensors.push((name.clone(), var.as_tensor().copy()?));
        }
        for (name, _) in &vars {
            let e = self.ema.var(name).ok_or_else(|| Error::Contract(format!("no EMA slot for {name}")))?;
            tensors.push((format!("ema/{name}"), e.as_tensor().copy()?));
        }
        for (name, _) in &vars {
            tensors.push((format!("adam.m/{name}"), self.adam.m[name].clone()));
        }
        for (name, _) in &vars {
            tensors.push((format!("adam.v/{name}"), self.adam.v[name].clone()));
        }
        Ok(Checkpoint {
            digest: self.cfg.digest(),
            config_text: self.cfg.canonical(),
            step: self.step,
            optimizer_steps: self.adam.t,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.write(path)
    }

    /// Rebuilds a trainer from the configuration stored in the checkpoint.
    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        let cfg = TrainConfig::from_toml(&ckpt.config_text)
            .map_err(|e| Error::Checkpoint(format!("{}: stored config is invalid: {e}", path.display())))?;
        if cfg.digest() != ckpt.digest {
            return Err(Error::Checkpoint(format!(
                "{}: stored config does not match its digest",
                path.display()
            )));
        }
        let mut t = Self::new(cfg, dtype)?;
        t.restore(&ckpt, false)?;
        Ok(t)
    }

    /// Restores parameters, EMA, optimizer state and step count into this
    /// trainer. A checkpoint written under a different configuration is
    /// refused unless `force` is set.
    pub fn restore(&mut self, ckpt: &Checkpoint, force: bool) -> Result<()> {
        if ckpt.digest != self.cfg.digest() && !force {
            return Err(Error::Checkpoint(format!(
                "configuration digest mismatch ({})",
                config_diff(&ckpt.config_text, &self.cfg.canonical())
            )));
        }
        let expected = 4 * self.store.len();
        if ckpt.tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {expected}",
                ckpt.tensors.len()
            )));
        }
        let mut problems = Vec::new();
        for (name, var) in self.store.vars() {
            for key in [name.clone(), format!("ema/{name}"), format!("adam.m/{name}"), format!("adam.v/{name}")] {
                match ckpt.get(&key) {
                    None => problems.push(format!("{key} missing")),
                    Some(t) if t.dims() != var.dims() => {
                        problems.push(format!("{key}: checkpoint {:?}, model {:?}", t.dims(), var.dims()))
                    }
                    Some(_) => {}
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!("dimension mismatch: {}", problems.join("; "))));
        }
        let dtype = self.store.dtype();
        for (name, var) in self.store.vars() {
            var.set(&ckpt.get(&name).expect("checked").to_dtype(dtype)?)?;
            let e = self.ema.var(&name).expect("ema mirrors params");
            e.set(&ckpt.get(&format!("ema/{name}")).expect("checked").to_dtype(dtype)?)?;
            let m = ckpt.get(&format!("adam.m/{name}")).expect("checked").to_dtype(dtype)?;
            let v = ckpt.get(&format!("adam.v/{name}")).expect("checked").to_dtype(dtype)?;
            self.adam.m.insert(name.clone(), m);
            self.adam.v.insert(name, v);
        }
        self.adam.t = ckpt.optimizer_steps;
        self.step = ckpt.step;
        Ok(())
    }

    pub fn resume(&mut self, path: &Path, force: bool) -> Result<()> {
        let ckpt = Checkpoint::read(path)?;
        self.restore(&ckpt, force)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// Built-in random convolutional teacher unless a feature file is configured.
pub fn default_teacher(cfg: &TrainConfig, dtype: DType) -> Result<Box<dyn FeatureTeacher>> {
    if cfg.repa.features.is_empty() {
        Ok(Box::new(RandomConvTeacher::new(
            cfg.model.channels,
            cfg.repa.teacher_dim,
            cfg.repa.teacher_seed,
            dtype,
        )?))
    } else {
        Ok(Box::new(PrecomputedTeacher::load(Path::new(&cfg.repa.features))?))
    }
}

/// Human-readable list of keys whose values differ between two canonical configs.
pub fn config_diff(stored: &str, current: &str) -> String {
    fn flatten(text: &str) -> Vec<(String, String)> {
        let table: toml::Table = toml::from_str(text).unwrap_or_default();
        let mut out = Vec::new();
        for (section, v) in table {
            match v {
                toml::Value::Table(t) => {
                    for (k, v) in t {
                        out.push((format!("{section}.{k}"), v.to_string()));
                    }
                }
                other => out.push((section, other.to_string())),
            }
        }
        out
    }
    let a = flatten(stored);
    let b = flatten(current);
    let diffs: Vec<String> = a
        .iter()
        .filter_map(|(k, va)| {
            let vb = b.iter().find(|(kb, _)| kb == k).map(|(_, v)| v.as_str()).unwrap_or("<absent>");
            (va != vb).then(|| format!("{k}: checkpoint {va}, current {vb}"))
        })
        .collect();
    if diffs.is_empty() {
        "no differing keys".into()
    } else {
        diffs.join(", ")
    }
}

#[cfg(test)]
mod tests;
