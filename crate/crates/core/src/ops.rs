//! Small differentiable building blocks shared by the backbone and the head.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

pub(crate) const RMS_EPS: f64 = 1e-6;

/// Affine map over the last axis. Weight is `out × in`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &ParamStore, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        Self::with_init(store, in_dim, out_dim, bias, Init::fan_in(in_dim))
    }

    pub fn with_init(
        store: &ParamStore,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = store.get((out_dim, in_dim), "weight", init)?;
        let bias = if bias {
            let binit = match init {
                Init::Uniform(_) => Init::fan_in(in_dim),
                other => other,
            };
            Some(store.get(out_dim, "bias", binit)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| Error::Contract("linear on a scalar".into()))?;
        if in_dim != self.in_dim() {
            return Err(Error::Contract(format!(
                "linear expects last dim {}, got {in_dim}",
                self.in_dim()
            )));
        }
        let rows = x.elem_count() / in_dim;
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

/// RMS normalization over the last axis without a learned gain.
pub fn rms_norm(x: &Tensor) -> Result<Tensor> {
    let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
    let denom = (ms + RMS_EPS)?.sqrt()?;
    Ok(x.broadcast_div(&denom)?)
}

/// Softmax over the last axis. The max shift is detached; softmax is shift
/// invariant so gradients are unaffected.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// `1 × 1` tensor comparisons are awkward in candle; this returns a host f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.sum_all()?.to_scalar::<f64>()?)
}

pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok((a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?
        .abs()?
        .flatten_all()?
        .max(0)?
        .to_scalar::<f64>()?)
}

/// Interpolation matrix for 1-D bilinear resampling with half-pixel centers
/// (`align_corners = false`). Rows index output samples.
pub fn linear_resample_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        let frac = src - lo as f64;
        m[o * n_in + lo] += 1.0 - frac;
        m[o * n_in + hi] += frac;
    }
    m
}

/// Bilinear resize of a `B×C×H×W` batch, expressed as two matrix products so
/// it stays differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dtype = x.dtype();
    let rh = crate::params::host_tensor(linear_resample_matrix(h, out_h), (out_h, h), dtype)?;
    let rw = crate::params::host_tensor(linear_resample_matrix(w, out_w), (out_w, w), dtype)?;
    // rows: (B*C*H, W) x (W, W')
    let y = x.reshape((b * c * h, w))?.matmul(&rw.t()?)?;
    let y = y.reshape((b * c, h, out_w))?;
    let y = rh.broadcast_left(b * c)?.contiguous()?.matmul(&y)?;
    Ok(y.reshape((b, c, out_h, out_w))?)
}

#[cfg(test)]
pub(crate) fn cpu() -> candle_core::Device {
    candle_core::Device::Cpu
}
