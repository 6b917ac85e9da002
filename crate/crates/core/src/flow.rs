//! Rectified-flow process: linear interpolation between noise (`t = 0`) and
//! data (`t = 1`), the constant velocity target, timestep sampling and the
//! flow-matching loss.

use candle_core::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::params::host_tensor;

/// A noised training batch together with its regression target.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub x_t: Tensor,
    /// Per-sample times as a `B` tensor in the batch dtype.
    pub t: Tensor,
    pub times: Vec<f64>,
    pub eps: Tensor,
    pub v_target: Tensor,
}

/// `alpha(t) = t`, `sigma(t) = 1 - t`.
pub fn interpolate(x_real: &Tensor, eps: &Tensor, times: &[f64]) -> Result<FlowSample> {
    contract!(
        x_real.dims() == eps.dims(),
        "data shape {:?} != noise shape {:?}",
        x_real.dims(),
        eps.dims()
    );
    let b = x_real.dims().first().copied().unwrap_or(0);
    contract!(times.len() == b, "{} timesteps for a batch of {b}", times.len());
    if let Some(bad) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Domain(format!("timestep {bad} outside [0, 1]")));
    }
    let dtype = x_real.dtype();
    let mut bshape = vec![1usize; x_real.rank()];
    bshape[0] = b;
    let t = host_tensor(times.to_vec(), b, dtype)?;
    let alpha = t.reshape(bshape.clone())?;
    let sigma = host_tensor(times.iter().map(|t| 1.0 - t).collect(), bshape, dtype)?;
    let x_t = (x_real.broadcast_mul(&alpha)? + eps.broadcast_mul(&sigma)?)?;
    let v_target = (x_real - eps)?;
    Ok(FlowSample {
        x_t,
        t,
        times: times.to_vec(),
        eps: eps.clone(),
        v_target,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepKind {
    Uniform,
    Lognorm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimestepSampler {
    kind: TimestepKind,
    loc: f64,
    scale: f64,
}

impl TimestepSampler {
    pub fn new(kind: TimestepKind, loc: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) || !loc.is_finite() {
            return Err(Error::Domain(format!(
                "timestep sampler needs finite loc and scale > 0, got loc={loc} scale={scale}"
            )));
        }
        Ok(Self { kind, loc, scale })
    }

    pub fn kind(&self) -> TimestepKind {
        self.kind
    }

    /// Draws `batch` times. Logit-normal draws are kept strictly inside (0, 1).
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<f64> {
        match self.kind {
            TimestepKind::Uniform => (0..batch).map(|_| rng.random::<f64>()).collect(),
            TimestepKind::Lognorm => {
                let normal = Normal::new(self.loc, self.scale).expect("validated");
                (0..batch)
                    .map(|_| {
                        let z: f64 = normal.sample(rng);
                        1.0 / (1.0 + (-z.clamp(-30.0, 30.0)).exp())
                    })
                    .collect()
            }
        }
    }
}

pub fn sample_timesteps<R: Rng + ?Sized>(
    sampler: &TimestepSampler,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if batch == 0 {
        return Err(Error::Contract("batch must be at least 1".into()));
    }
    Ok(sampler.sample(batch, rng))
}

/// Mean squared error between predicted and target velocity.
pub fn flow_loss(v_pred: &Tensor, sample: &FlowSample) -> Result<Tensor> {
    contract!(
        v_pred.dims() == sample.v_target.dims(),
        "prediction shape {:?} != target shape {:?}",
        v_pred.dims(),
        sample.v_target.dims()
    );
    Ok((v_pred - &sample.v_target)?.sqr()?.mean_all()?)
}

/// Standard normal noise drawn on the host so results depend only on `rng`.
pub fn gaussian_noise<R: Rng + ?Sized>(
    dims: &[usize],
    dtype: candle_core::DType,
    rng: &mut R,
) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    host_tensor(v, dims.to_vec(), dtype)
}
