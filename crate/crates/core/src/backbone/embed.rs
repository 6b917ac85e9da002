use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::ops::Linear;
use crate::params::{host_tensor, Init, ParamStore};

const FREQ_DIM: usize = 256;
const MAX_PERIOD: f64 = 10_000.0;
/// Times in [0, 1] are stretched to the usual [0, 1000] range before the
/// sinusoidal embedding.
const TIME_SCALE: f64 = 1000.0;

/// Sinusoidal frequency features of `t`, `[cos | sin]` halves.
pub fn timestep_features(times: &[f64], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(times.len() * dim);
    for &t in times {
        let arg = t * TIME_SCALE;
        let freqs = (0..half).map(|i| (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp());
        let (mut cos, mut sin): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((arg * f).cos(), (arg * f).sin())).unzip();
        out.append(&mut cos);
        out.append(&mut sin);
        if dim % 2 == 1 {
            out.push(0.0);
        }
    }
    out
}

/// Sinusoidal features followed by a two-layer SiLU projection.
#[derive(Debug, Clone)]
pub struct TimestepEmbedder {
    fc1: Linear,
    fc2: Linear,
}

impl TimestepEmbedder {
    pub fn new(store: &ParamStore, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::with_init(&store.pp("fc1"), FREQ_DIM, hidden, true, Init::Normal(0.02))?,
            fc2: Linear::with_init(&store.pp("fc2"), hidden, hidden, true, Init::Normal(0.02))?,
        })
    }

    pub fn forward(&self, times: &[f64]) -> Result<Tensor> {
        let dtype = self.fc1.weight().dtype();
        let feats = host_tensor(timestep_features(times, FREQ_DIM), (times.len(), FREQ_DIM), dtype)?;
        self.fc2.forward(&self.fc1.forward(&feats)?.silu()?)
    }
}

/// Class table with one extra row for the unconditional label.
#[derive(Debug, Clone)]
pub struct LabelEmbedder {
    table: Tensor,
    num_classes: usize,
}

impl LabelEmbedder {
    pub fn new(store: &ParamStore, num_classes: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            table: store.get((num_classes + 1, hidden), "table", Init::Normal(0.02))?,
            num_classes,
        })
    }

    pub fn null_label(&self) -> u32 {
        self.num_classes as u32
    }

    pub fn forward(&self, labels: &[u32]) -> Result<Tensor> {
        if let Some(bad) = labels.iter().find(|&&l| l as usize > self.num_classes) {
            return Err(Error::Domain(format!(
                "label {bad} outside [0, {}] (null = {})",
                self.num_classes, self.num_classes
            )));
        }
        let idx = Tensor::from_vec(labels.to_vec(), labels.len(), self.table.device())?;
        Ok(self.table.index_select(&idx, 0)?)
    }
}

/// Class and timestep embeddings for one batch.
#[derive(Debug, Clone)]
pub struct ConditionEmbedding {
    pub y: Tensor,
    pub t_emb: Tensor,
}

impl ConditionEmbedding {
    /// `y + t_emb`, the vector every block's modulation is derived from.
    pub fn combined(&self) -> Result<Tensor> {
        Ok((&self.y + &self.t_emb)?)
    }
}
