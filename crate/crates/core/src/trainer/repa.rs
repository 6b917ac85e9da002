//! Representation alignment: cosine agreement between projected hidden
//! states of one trunk layer and per-token features from a frozen teacher.

use std::path::Path;

use candle_core::{DType, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::backbone::PatchGrid;
use crate::error::{contract, Error, Result};
use crate::ops::Linear;
use crate::params::{host_tensor, ParamStore};

pub const COSINE_EPS: f64 = 1e-8;

/// Mean over tokens of `1 − cos(projected, teacher)`; lies in `[0, 2]`.
pub fn repa_loss(projected: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    contract!(
        projected.dims() == teacher.dims(),
        "projected features {:?} do not match teacher features {:?}",
        projected.dims(),
        teacher.dims()
    );
    let dot = (projected * teacher)?.sum(D::Minus1)?;
    let na = projected.sqr()?.sum(D::Minus1)?.sqrt()?.maximum(COSINE_EPS)?;
    let nb = teacher.sqr()?.sum(D::Minus1)?.sqrt()?.maximum(COSINE_EPS)?;
    let cos = (dot / (na * nb)?)?;
    Ok(cos.affine(-1.0, 1.0)?.mean_all()?)
}

/// Two-layer MLP from trunk width to teacher width.
#[derive(Debug, Clone)]
pub struct Projector {
    fc1: Linear,
    fc2: Linear,
}

impl Projector {
    pub fn new(store: &ParamStore, hidden: usize, inner: usize, out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&store.pp("fc1"), hidden, inner, true)?,
            fc2: Linear::new(&store.pp("fc2"), inner, out, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.silu()?)
    }
}

/// Maps clean images to `B × N × F` feature tokens on the patch grid.
/// `indices` identify the images within their dataset.
pub trait FeatureTeacher: Send + Sync {
    fn dim(&self) -> usize;
    fn features(&self, images: &Tensor, grid: &PatchGrid, indices: &[usize]) -> Result<Tensor>;
}

/// Frozen two-layer convolutional encoder with fixed random weights,
/// average-pooled over each patch.
#[derive(Debug, Clone)]
pub struct RandomConvTeacher {
    conv1: Tensor,
    conv2: Tensor,
    dim: usize,
}

impl RandomConvTeacher {
    pub const WIDTH: usize = 32;

    pub fn new(channels: usize, dim: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut kernel = |out: usize, inp: usize| -> Result<Tensor> {
            let b = 1.0 / ((inp * 9) as f64).sqrt();
            let u = Uniform::new_inclusive(-b, b).expect("valid bound");
            let v: Vec<f64> = (0..out * inp * 9).map(|_| u.sample(&mut rng)).collect();
            host_tensor(v, (out, inp, 3, 3), dtype)
        };
        Ok(Self {
            conv1: kernel(Self::WIDTH, channels)?,
            conv2: kernel(dim, Self::WIDTH)?,
            dim,
        })
    }
}

impl FeatureTeacher for RandomConvTeacher {
    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, images: &Tensor, grid: &PatchGrid, _indices: &[usize]) -> Result<Tensor> {
        let images = images.detach().to_dtype(self.conv1.dtype())?;
        let h = images.conv2d(&self.conv1, 1, 1, 1, 1)?.silu()?;
        let h = h.conv2d(&self.conv2, 1, 1, 1, 1)?;
        let pooled = h.avg_pool2d(grid.patch)?;
        let (b, f, gh, gw) = pooled.dims4()?;
        contract!((gh, gw) == (grid.grid_h, grid.grid_w), "pooled grid {gh}x{gw} does not match tokens");
        Ok(pooled.reshape((b, f, gh * gw))?.transpose(1, 2)?.contiguous()?)
    }
}

/// Features computed offline, stored as a safetensors file holding one
/// `count × N × F` tensor named `features`, indexed by dataset position.
#[derive(Debug, Clone)]
pub struct PrecomputedTeacher {
    table: Tensor,
}

impl PrecomputedTeacher {
    pub const TENSOR_NAME: &'static str = "features";

    pub fn load(path: &Path) -> Result<Self> {
        let mut map = candle_core::safetensors::load(path, &candle_core::Device::Cpu)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let table = map
            .remove(Self::TENSOR_NAME)
            .ok_or_else(|| Error::Data(format!("{} has no '{}' tensor", path.display(), Self::TENSOR_NAME)))?;
        Self::from_tensor(table)
    }

    pub fn from_tensor(table: Tensor) -> Result<Self> {
        contract!(table.rank() == 3, "feature table must be count x tokens x dim, got {:?}", table.dims());
        Ok(Self { table })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.table
            .save_safetensors(Self::TENSOR_NAME, path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

impl FeatureTeacher for PrecomputedTeacher {
    fn dim(&self) -> usize {
        self.table.dims()[2]
    }

    fn features(&self, images: &Tensor, grid: &PatchGrid, indices: &[usize]) -> Result<Tensor> {
        let (count, tokens, _) = self.table.dims3()?;
        contract!(tokens == grid.tokens(), "feature table has {tokens} tokens, grid has {}", grid.tokens());
        contract!(indices.len() == images.dims()[0], "{} indices for {} images", indices.len(), images.dims()[0]);
        if let Some(bad) = indices.iter().find(|&&i| i >= count) {
            return Err(Error::Data(format!("image index {bad} outside feature table of {count}")));
        }
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        let idx = Tensor::from_vec(idx, indices.len(), self.table.device())?;
        Ok(self.table.index_select(&idx, 0)?.to_dtype(images.dtype())?)
    }
}
