//! Datasets: image folders and deterministic synthetic generators.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::png::load_image;
use crate::config::{DataConfig, DataSource, ModelConfig};
use crate::error::{Error, Result};
use crate::trainer::Batch;

/// What to ingest and at which geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub root: PathBuf,
    pub size: usize,
    pub sigma: f64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
}

impl DatasetSpec {
    pub fn from_config(data: &DataConfig, model: &ModelConfig) -> Self {
        Self {
            source: data.source,
            root: PathBuf::from(&data.root),
            size: data.size,
            sigma: data.sigma,
            seed: data.seed,
            height: model.image_h,
            width: model.image_w,
            channels: model.channels,
            classes: model.num_classes,
        }
    }
}

/// In-memory dataset with values in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `N × C × H × W`, f32.
    pub images: Tensor,
    pub labels: Vec<u32>,
    /// Files that could not be decoded.
    pub skipped: Vec<PathBuf>,
    seed: u64,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u32>, seed: u64) -> Result<Self> {
        let n = images.dims4()?.0;
        if n == 0 {
            return Err(Error::Data("dataset is empty".into()));
        }
        if labels.len() != n {
            return Err(Error::Data(format!("{} labels for {n} images", labels.len())));
        }
        Ok(Self {
            images,
            labels,
            skipped: Vec::new(),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> Result<Tensor> {
        Ok(self.images.narrow(0, i, 1)?)
    }

    /// Position of the first item with each label, in label order.
    pub fn class_representatives(&self) -> Vec<(u32, usize)> {
        let mut reps: Vec<(u32, usize)> = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if !reps.iter().any(|(c, _)| *c == l) {
                reps.push((l, i));
            }
        }
        reps.sort_unstable();
        reps
    }

    /// Dataset order for epoch `epoch`: a permutation fixed by the seed.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch.wrapping_add(1));
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// The batch used by 1-based training step `step`. Batches walk through
    /// consecutive shuffled epochs, so the result depends only on `step`.
    pub fn batch(&self, step: u64, batch_size: usize) -> Result<Batch> {
        if batch_size == 0 {
            return Err(Error::Contract("batch size must be at least 1".into()));
        }
        let n = self.len() as u64;
        let start = step.saturating_sub(1) * batch_size as u64;
        let mut epoch = u64::MAX;
        let mut order = Vec::new();
        let mut indices = Vec::with_capacity(batch_size);
        for p in start..start + batch_size as u64 {
            if p / n != epoch {
                epoch = p / n;
                order = self.epoch_order(epoch);
            }
            indices.push(order[(p % n) as usize]);
        }
        self.gather(&indices)
    }

    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        let idx_t = Tensor::from_vec(idx, indices.len(), &Device::Cpu)?;
        Ok(Batch {
            images: self.images.index_select(&idx_t, 0)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            indices: indices.to_vec(),
        })
    }
}

pub fn ingest(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.height == 0 || spec.width == 0 || spec.channels == 0 || spec.classes == 0 {
        return Err(Error::Data("dataset geometry and class count must be positive".into()));
    }
    match spec.source {
        DataSource::ImageDir => image_dir(spec),
        DataSource::SyntheticGaussians => synthetic_gaussians(spec),
        DataSource::SyntheticTextures => synthetic_textures(spec),
        DataSource::MemorizeN => memorize_n(spec),
    }
}

fn from_values(values: Vec<f32>, spec: &DatasetSpec, labels: Vec<u32>) -> Result<Dataset> {
    let n = labels.len();
    let images = Tensor::from_vec(values, (n, spec.channels, spec.height, spec.width), &Device::Cpu)?;
    Dataset::new(images, labels, spec.seed)
}

fn image_dir(spec: &DatasetSpec) -> Result<Dataset> {
    let root = &spec.root;
    if !root.is_dir() {
        return Err(Error::Data(format!("image directory {} does not exist", root.display())));
    }
    let mut classes: Vec<PathBuf> = list_dir(root)?.into_iter().filter(|p| p.is_dir()).collect();
    classes.sort();
    let groups: Vec<(u32, Vec<PathBuf>)> = if classes.is_empty() {
        vec![(0, list_dir(root)?.into_iter().filter(|p| p.is_file()).collect())]
    } else {
        if classes.len() > spec.classes {
            return Err(Error::Data(format!(
                "{} class directories but the model has {} classes",
                classes.len(),
                spec.classes
            )));
        }
        classes
            .iter()
            .enumerate()
            .map(|(i, d)| Ok((i as u32, list_dir(d)?.into_iter().filter(|p| p.is_file()).collect())))
            .collect::<Result<_>>()?
    };
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = Vec::new();
    for (label, mut files) in groups {
        files.sort();
        for f in files {
            match load_image(&f, spec.height, spec.width, spec.channels) {
                Ok(v) => {
                    values.extend(v);
                    labels.push(label);
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", f.display());
                    skipped.push(f);
                }
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Data(format!(
            "no decodable images under {} ({} skipped)",
            root.display(),
            skipped.len()
        )));
    }
    let mut ds = from_values(values, spec, labels)?;
    ds.skipped = skipped;
    Ok(ds)
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')) {
            out.push(p);
        }
    }
    Ok(out)
}

/// Smooth per-class pattern with values inside `[-amp, amp]`.
fn smooth_pattern(rng: &mut ChaCha8Rng, spec: &DatasetSpec, amp: f64) -> Vec<f64> {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let waves: Vec<(f64, f64, f64, [f64; 4])> = (0..4)
        .map(|_| {
            let freq = rng.random_range(0.5..3.0);
            let angle = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let mut colour = [0.0; 4];
            for v in colour.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            (freq, angle, phase, colour)
        })
        .collect();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                let s: f64 = waves
                    .iter()
                    .map(|(f, a, p, col)| col[ch % 4] * (2.0 * PI * f * (u * a.cos() + v * a.sin()) + p).sin())
                    .sum();
                out[(ch * h + y) * w + x] = amp * (0.6 * s).tanh();
            }
        }
    }
    out
}

fn class_rng(seed: u64, class: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1_000_000 + class as u64);
    rng
}

/// Class means are smooth patterns in `[-0.5, 0.5]`; samples add `σ·N(0, 1)`
/// per pixel and are clamped to `[-1, 1]`.
pub fn class_means(spec: &DatasetSpec) -> Vec<Vec<f64>> {
    (0..spec.classes)
        .map(|k| smooth_pattern(&mut class_rng(spec.seed, k), spec, 0.5))
        .collect()
}

fn synthetic_gaussians(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.size == 0 {
        return Err(Error::Data("synthetic dataset size must be positive".into()));
    }
    let means = class_means(spec);
    let normal = Normal::new(0.0, spec.sigma.max(0.0)).map_err(|e| Error::Data(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = Vec::with_capacity(spec.size * means[0].len());
    let mut labels = Vec::with_capacity(spec.size);
    for i in 0..spec.size {
        let k = i % spec.classes;
        values.extend(means[k].iter().map(|m| (m + normal.sample(&mut rng)).clamp(-1.0, 1.0) as f32));
        labels.push(k as u32);
    }
    from_values(values, spec, labels)
}

/// Oriented gratings: each class has its own frequency and orientation;
/// samples draw a random phase and contrast.
fn synthetic_textures(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.size == 0 {
        return Err(Error::Data("synthetic dataset size must be positive".into()));
    }
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let params: Vec<(f64, f64, Vec<f64>)> = (0..spec.classes)
        .map(|k| {
            let mut r = class_rng(spec.seed, k);
            let freq = 1.0 + 5.0 * r.random::<f64>();
            let angle = PI * k as f64 / spec.classes as f64;
            let tint = (0..c).map(|_| r.random_range(0.3..1.0)).collect();
            (freq, angle, tint)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = Vec::with_capacity(spec.size * c * h * w);
    let mut labels = Vec::with_capacity(spec.size);
    for i in 0..spec.size {
        let k = i % spec.classes;
        let (freq, angle, tint) = &params[k];
        let phase = rng.random_range(0.0..2.0 * PI);
        let contrast = rng.random_range(0.6..0.95);
        for t in tint.iter() {
            for y in 0..h {
                for x in 0..w {
                    let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                    let s = (2.0 * PI * freq * (u * angle.cos() + v * angle.sin()) + phase).sin();
                    values.push((contrast * t * s) as f32);
                }
            }
        }
        labels.push(k as u32);
    }
    from_values(values, spec, labels)
}

/// `size` fixed images, labelled `i mod classes`. Each image mixes a smooth
/// colour field with one sharp-edged rectangle.
fn memorize_n(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.size == 0 {
        return Err(Error::Data("memorize_n needs at least one image".into()));
    }
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut values = Vec::with_capacity(spec.size * c * h * w);
    let mut labels = Vec::with_capacity(spec.size);
    for i in 0..spec.size {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(2_000_000 + i as u64);
        let mut img = smooth_pattern(&mut rng, spec, 0.8);
        let (y0, x0) = (rng.random_range(0..h / 2), rng.random_range(0..w / 2));
        let (y1, x1) = (y0 + rng.random_range(h / 4..=h / 2), x0 + rng.random_range(w / 4..=w / 2));
        let colour: Vec<f64> = (0..c).map(|_| rng.random_range(-0.9..0.9)).collect();
        for (ch, col) in colour.iter().enumerate() {
            for y in y0..y1.min(h) {
                for x in x0..x1.min(w) {
                    img[(ch * h + y) * w + x] = *col;
                }
            }
        }
        values.extend(img.iter().map(|&v| v as f32));
        labels.push((i % spec.classes) as u32);
    }
    from_values(values, spec, labels)
}
