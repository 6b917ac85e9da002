//! Per-patch neural-field decoder.
//!
//! Each token's last hidden state is mapped, through `Linear(SiLU(·))`, to the
//! weights of a small bias-free MLP. That MLP is evaluated at every pixel of
//! the token's patch on `concat(PE(i, j), x_noisy(i, j))`, its output feature
//! is optionally RMS-normalized, and a shared linear layer turns the feature
//! into velocity channels.
//!
//! Predicted matrices are row-normalized; rows whose norm falls below
//! [`ZERO_ROW_NORM`] are left as they are.

mod encoding;

use candle_core::{Tensor, D};

pub use encoding::{encode_coords, CoordEncoding};

use crate::backbone::{patchify, unpatchify, PatchGrid};
use crate::config::{FieldConfig, FieldNorm};
use crate::error::{contract, Error, Result};
use crate::ops::{ensure_finite, rms_norm, Linear};
use crate::params::ParamStore;

pub const ZERO_ROW_NORM: f64 = 1e-8;

/// Divides every row (last axis) by its L2 norm, leaving near-zero rows alone.
pub fn row_normalize(w: &Tensor) -> Result<Tensor> {
    let sumsq = w.sqr()?.sum_keepdim(D::Minus1)?;
    let tiny = sumsq.lt(ZERO_ROW_NORM * ZERO_ROW_NORM)?.to_dtype(w.dtype())?;
    // sqrt(sumsq + 1) == 1 exactly for guarded rows, and the gradient stays finite.
    let norm = (sumsq + tiny)?.sqrt()?;
    Ok(w.broadcast_div(&norm)?)
}

/// Predicted MLP weights for `batch × tokens` patches, stacked on a leading
/// `M = batch·tokens` axis. Each matrix is `out × in`.
#[derive(Debug, Clone)]
pub struct FieldWeights {
    /// `M × D1 × Din`
    pub w1: Tensor,
    /// Extra `M × D1 × D1` layers between `w1` and `w2`.
    pub hidden: Vec<Tensor>,
    /// `M × D2 × D1`
    pub w2: Tensor,
    pub batch: usize,
    pub tokens: usize,
}

impl FieldWeights {
    pub fn layers(&self) -> impl Iterator<Item = &Tensor> {
        std::iter::once(&self.w1).chain(self.hidden.iter()).chain(std::iter::once(&self.w2))
    }

    pub fn patches(&self) -> usize {
        self.batch * self.tokens
    }

    pub fn normalized(&self, norm: FieldNorm) -> Result<Self> {
        let all = !matches!(norm, FieldNorm::Fc1);
        Ok(Self {
            w1: row_normalize(&self.w1)?,
            hidden: self
                .hidden
                .iter()
                .map(|h| if all { row_normalize(h) } else { Ok(h.clone()) })
                .collect::<Result<_>>()?,
            w2: if all { row_normalize(&self.w2)? } else { self.w2.clone() },
            batch: self.batch,
            tokens: self.tokens,
        })
    }
}

#[derive(Debug, Clone)]
pub struct NerfHead {
    proj: Linear,
    out: Linear,
    enc: CoordEncoding,
    field: FieldConfig,
    channels: usize,
    patch: usize,
}

impl NerfHead {
    pub fn new(store: &ParamStore, hidden: usize, channels: usize, patch: usize, field: &FieldConfig) -> Result<Self> {
        let max_freq = if field.max_freq == 0 { patch } else { field.max_freq };
        let enc = CoordEncoding::new(field.encoding, max_freq)?;
        let din = enc.pe_dim() + channels;
        let (d1, d2) = (field.channels, field.out_channels);
        let params = d1 * din + d2 * d1 + (field.depth - 1) * d1 * d1;
        Ok(Self {
            proj: Linear::new(&store.pp("proj"), hidden, params, true)?,
            out: Linear::new(&store.pp("out"), d2, channels, true)?,
            enc,
            field: field.clone(),
            channels,
            patch,
        })
    }

    /// Native (training) patch size.
    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn encoding(&self) -> &CoordEncoding {
        &self.enc
    }

    pub fn field(&self) -> &FieldConfig {
        &self.field
    }

    pub fn input_dim(&self) -> usize {
        self.enc.pe_dim() + self.channels
    }

    pub fn projection(&self) -> &Linear {
        &self.proj
    }

    pub fn output_layer(&self) -> &Linear {
        &self.out
    }

    /// `Linear(SiLU(hidden))` split into matrices, before normalization.
    pub fn predict_raw(&self, last_hidden: &Tensor) -> Result<FieldWeights> {
        let (b, n, _) = last_hidden.dims3()?;
        let m = b * n;
        let p = self.proj.forward(&last_hidden.silu()?)?.reshape((m, self.proj.out_dim()))?;
        let (d1, d2, din) = (self.field.channels, self.field.out_channels, self.input_dim());
        let mut offset = 0;
        let mut take = |rows: usize, cols: usize| -> Result<Tensor> {
            let t = p.narrow(1, offset, rows * cols)?.reshape((m, rows, cols))?;
            offset += rows * cols;
            Ok(t)
        };
        let w1 = take(d1, din)?;
        let w2 = take(d2, d1)?;
        let hidden = (1..self.field.depth).map(|_| take(d1, d1)).collect::<Result<Vec<_>>>()?;
        Ok(FieldWeights {
            w1,
            hidden,
            w2,
            batch: b,
            tokens: n,
        })
    }

    pub fn predict_weights(&self, last_hidden: &Tensor) -> Result<FieldWeights> {
        self.predict_raw(last_hidden)?.normalized(self.field.norm)
    }

    /// Velocity for every pixel of every patch. `x_patch` is `M × (K·K) × C`
    /// in row-major pixel order; returns the same shape.
    pub fn decode_velocity(&self, weights: &FieldWeights, x_patch: &Tensor, patch: usize) -> Result<Tensor> {
        let (m, pixels, c) = x_patch.dims3()?;
        contract!(c == self.channels, "expected {} channels, got {c}", self.channels);
        contract!(pixels == patch * patch, "{pixels} pixels for a {patch}x{patch} patch");
        contract!(
            m == weights.patches(),
            "{m} pixel blocks for {} predicted fields",
            weights.patches()
        );
        contract!(
            weights.w1.dims()[1..] == [self.field.channels, self.input_dim()],
            "first layer {:?} does not map {} -> {}",
            weights.w1.dims(),
            self.input_dim(),
            self.field.channels
        );
        ensure_finite(x_patch, "noisy pixels")?;
        let dtype = x_patch.dtype();
        let pe = encode_coords(&self.enc, patch, dtype)?
            .reshape((1, pixels, self.enc.pe_dim()))?
            .broadcast_as((m, pixels, self.enc.pe_dim()))?;
        let input = Tensor::cat(&[&pe, x_patch], D::Minus1)?;
        let mut h = batched_apply(&input, &weights.w1)?.silu()?;
        for w in &weights.hidden {
            h = batched_apply(&h, w)?.silu()?;
        }
        let mut feat = batched_apply(&h, &weights.w2)?;
        if self.field.norm == FieldNorm::Full {
            feat = rms_norm(&feat)?;
        }
        let v = self.out.forward(&feat)?;
        ensure_finite(&v, "decoded velocity")?;
        Ok(v)
    }

    /// Predict and decode on the native patch grid; `x_noisy` is `B×C×H×W`.
    pub fn forward(&self, last_hidden: &Tensor, x_noisy: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
        let weights = self.predict_weights(last_hidden)?;
        self.decode_on_grid(&weights, x_noisy, grid)
    }

    fn decode_on_grid(&self, weights: &FieldWeights, x_noisy: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
        let b = x_noisy.dims4()?.0;
        let pixels = grid.patch * grid.patch;
        let x_patch = patchify(x_noisy, grid)?.reshape((b * grid.tokens(), pixels, grid.channels))?;
        let v = self.decode_velocity(weights, &x_patch, grid.patch)?;
        unpatchify(&v.reshape((b, grid.tokens(), grid.token_dim()))?, grid)
    }

    /// Decodes at `target_hw` by evaluating each field on a finer pixel grid;
    /// the token grid stays that of `grid`.
    pub fn decode_at_resolution(
        &self,
        weights: &FieldWeights,
        grid: &PatchGrid,
        target_hw: (usize, usize),
        x_noisy_hires: &Tensor,
    ) -> Result<Tensor> {
        let (th, tw) = target_hw;
        if th % grid.grid_h != 0 || tw % grid.grid_w != 0 {
            return Err(Error::Geometry(format!(
                "{th}x{tw} is not divisible by the {}x{} token grid",
                grid.grid_h, grid.grid_w
            )));
        }
        let (kh, kw) = (th / grid.grid_h, tw / grid.grid_w);
        if kh != kw {
            return Err(Error::Geometry(format!(
                "{th}x{tw} gives non-square {kh}x{kw} patches on the {}x{} grid",
                grid.grid_h, grid.grid_w
            )));
        }
        let (_, _, h, w) = x_noisy_hires.dims4()?;
        if (h, w) != target_hw {
            return Err(Error::Geometry(format!("noisy input is {h}x{w}, target is {th}x{tw}")));
        }
        self.decode_on_grid(weights, x_noisy_hires, &grid.with_patch(kh))
    }
}

/// `x: M×P×in`, `w: M×out×in` → `M×P×out`.
fn batched_apply(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(x.matmul(&w.transpose(1, 2)?.contiguous()?)?)
}

/// Plain linear decoder: token → `K·K·C` patch values.
#[derive(Debug, Clone)]
pub struct LinearHead {
    proj: Linear,
}

impl LinearHead {
    pub fn new(store: &ParamStore, hidden: usize, token_dim: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(&store.pp("proj"), hidden, token_dim, true)?,
        })
    }

    pub fn forward(&self, last_hidden: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
        unpatchify(&self.proj.forward(last_hidden)?, grid)
    }
}
