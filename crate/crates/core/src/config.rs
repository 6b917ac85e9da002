//! Run configuration: a sectioned key-value (TOML) record covering the model,
//! neural-field head, optimizer, flow schedule, alignment loss and dataset.
//!
//! Resolution order is flag > config file > default, applied per key by
//! merging TOML tables before deserializing.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::TimestepKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Per-patch neural field with predicted weights.
    Nerf,
    /// Plain linear projection from token to patch pixels.
    Linear,
}

/// Which predicted quantities are row-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldNorm {
    /// First predicted layer only.
    Fc1,
    /// Every predicted layer.
    Fc1Fc2,
    /// Every predicted layer plus RMS normalization of the output feature.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingMode {
    Dct,
    Sincos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    ImageDir,
    SyntheticGaussians,
    SyntheticTextures,
    MemorizeN,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub rope_theta: f64,
    pub head: HeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_h: 32,
            image_w: 32,
            channels: 3,
            patch: 8,
            hidden: 256,
            depth: 6,
            heads: 4,
            num_classes: 8,
            rope_theta: 10000.0,
            head: HeadKind::Nerf,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// SwiGLU inner width: 8/3 of the hidden size, rounded to a multiple of 8.
    pub fn ffn_hidden(&self) -> usize {
        let raw = 8.0 * self.hidden as f64 / 3.0;
        (((raw / 8.0).round() as usize) * 8).max(8)
    }

    /// Index of the unconditional label.
    pub fn null_label(&self) -> u32 {
        self.num_classes as u32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    /// Hidden width of the per-patch MLP.
    pub channels: usize,
    /// Width of the field's output feature before the shared projection.
    pub out_channels: usize,
    /// Number of predicted hidden layers.
    pub depth: usize,
    pub norm: FieldNorm,
    pub encoding: EncodingMode,
    /// Frequency count per axis; 0 means "equal to the patch size".
    pub max_freq: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            out_channels: 64,
            depth: 2,
            norm: FieldNorm::Full,
            encoding: EncodingMode::Dct,
            max_freq: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub ema_decay: f64,
    pub label_dropout: f64,
    pub seed: u64,
    /// 0 writes a checkpoint only at the end of a run.
    pub checkpoint_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 0.0,
            batch_size: 8,
            steps: 2000,
            ema_decay: 0.9999,
            label_dropout: 0.1,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub timestep: TimestepKind,
    pub loc: f64,
    pub scale: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            timestep: TimestepKind::Lognorm,
            loc: 0.0,
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepaConfig {
    pub weight: f64,
    /// 1-based block index whose output is aligned.
    pub layer: usize,
    pub teacher_dim: usize,
    pub teacher_seed: u64,
    pub projector_hidden: usize,
    /// Precomputed teacher feature file; empty selects the built-in encoder.
    pub features: String,
}

impl Default for RepaConfig {
    fn default() -> Self {
        Self {
            weight: 0.5,
            layer: 2,
            teacher_dim: 64,
            teacher_seed: 1234,
            projector_hidden: 512,
            features: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Image directory for `image_dir`.
    pub root: String,
    /// Number of items to materialize for synthetic sources.
    pub size: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::MemorizeN,
            root: String::new(),
            size: 8,
            sigma: 0.2,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub field: FieldConfig,
    pub train: OptimConfig,
    pub flow: FlowConfig,
    pub repa: RepaConfig,
    pub data: DataConfig,
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl TrainConfig {
    /// Small configuration used by smoke runs and tests.
    pub fn tiny() -> Self {
        let mut c = Self::default();
        c.model.hidden = 64;
        c.model.depth = 2;
        c.model.heads = 2;
        c.repa.layer = 1;
        c.repa.projector_hidden = 64;
        c.repa.teacher_dim = 16;
        c.field.channels = 16;
        c.field.out_channels = 16;
        c.train.ema_decay = 0.99;
        c.train.lr = 1e-3;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        check(m.patch >= 1, || "model.patch must be >= 1".into())?;
        check(m.image_h % m.patch == 0 && m.image_w % m.patch == 0, || {
            format!("image {}x{} not divisible by patch {}", m.image_h, m.image_w, m.patch)
        })?;
        check(m.image_h > 0 && m.image_w > 0 && m.channels > 0, || "image dims must be positive".into())?;
        check(m.hidden > 0 && m.heads > 0 && m.hidden % m.heads == 0, || {
            format!("hidden {} not divisible by heads {}", m.hidden, m.heads)
        })?;
        check(m.head_dim() % 4 == 0, || {
            format!("head dim {} must be a multiple of 4 for 2-D rotary encoding", m.head_dim())
        })?;
        check(m.depth >= 1, || "model.depth must be >= 1".into())?;
        check(m.num_classes >= 1, || "model.num_classes must be >= 1".into())?;
        check(m.rope_theta > 0.0, || "model.rope_theta must be > 0".into())?;
        let f = &self.field;
        check(f.channels >= 1 && f.out_channels >= 1 && f.depth >= 1, || {
            "field channels, out_channels and depth must be >= 1".into()
        })?;
        let t = &self.train;
        check(t.lr > 0.0 && t.lr.is_finite(), || format!("train.lr must be > 0, got {}", t.lr))?;
        check(t.batch_size >= 1, || "train.batch_size must be >= 1".into())?;
        check((0.0..1.0).contains(&t.ema_decay), || {
            format!("train.ema_decay must lie in [0, 1), got {}", t.ema_decay)
        })?;
        check((0.0..=1.0).contains(&t.label_dropout), || {
            format!("train.label_dropout must lie in [0, 1], got {}", t.label_dropout)
        })?;
        check((0.0..1.0).contains(&t.beta1) && (0.0..1.0).contains(&t.beta2) && t.eps > 0.0, || {
            "adam betas must lie in [0, 1) and eps > 0".into()
        })?;
        check(t.grad_clip >= 0.0, || "train.grad_clip must be >= 0".into())?;
        check(self.flow.scale > 0.0, || "flow.scale must be > 0".into())?;
        let r = &self.repa;
        check(r.weight >= 0.0, || "repa.weight must be >= 0".into())?;
        check(r.layer >= 1 && r.layer <= m.depth, || {
            format!("repa.layer {} must lie in [1, {}]", r.layer, m.depth)
        })?;
        check(r.teacher_dim >= 1 && r.projector_hidden >= 1, || "repa dims must be >= 1".into())?;
        check(self.data.sigma >= 0.0, || "data.sigma must be >= 0".into())?;
        Ok(())
    }

    /// Canonical serialization; its digest identifies a configuration.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Digest of the canonical form, ignoring the run-length keys
    /// `train.steps` and `train.checkpoint_every` so a run can be extended.
    pub fn digest(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.train.steps = 0;
        c.train.checkpoint_every = 0;
        Sha256::digest(c.canonical().as_bytes()).into()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Merges `file_text` over the defaults, then `overrides` (`section.key`,
    /// value) over the result.
    pub fn resolve(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut base = toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(text) = file_text {
            let file: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
            merge(&mut base, file);
        }
        for (key, value) in overrides {
            set_path(&mut base, key, parse_value(value))?;
        }
        let c: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => merge(dst, src),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').collect::<Vec<_>>();
    let leaf = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("bad key '{key}'")))?;
    let mut cur = table;
    for p in parts {
        cur = match cur.get_mut(p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown config section '{p}' in '{key}'"))),
        };
    }
    if !cur.contains_key(leaf) {
        return Err(Error::Config(format!("unknown config key '{key}'")));
    }
    cur.insert(leaf.to_string(), value);
    Ok(())
}
