use std::time::{Duration, Instant};

use candle_core::{DType, Tensor};
use rand::Rng;

use super::multistep::advance;
use super::{guided_velocity, GuidanceConfig, SolverKind, SolverState, VelocityField, Warmup};
use crate::error::{contract, Result};
use crate::flow::gaussian_noise;

/// Largest final magnitude not flagged as divergence.
pub const DIVERGENCE_THRESHOLD: f64 = 100.0;

#[derive(Debug, Clone)]
pub struct SampleOptions {
    pub steps: usize,
    pub solver: SolverKind,
    pub guidance: GuidanceConfig,
    pub warmup: Warmup,
    /// Record the clean-data estimate `x + (1 − t)·v` at every step.
    pub record_trajectory: bool,
    pub dtype: DType,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: 50,
            solver: SolverKind::Adams2,
            guidance: GuidanceConfig::default(),
            warmup: Warmup::LowerOrder,
            record_trajectory: false,
            dtype: DType::F32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Final samples clamped to `[-1, 1]`.
    pub images: Tensor,
    /// Final state before clamping.
    pub raw: Tensor,
    pub trajectory: Vec<Tensor>,
    /// Largest absolute value of the raw output (infinite when non-finite).
    pub max_abs: f64,
    pub diverged: bool,
    /// Number of velocity-field evaluations, counting each guided pair once.
    pub evaluations: usize,
    pub elapsed: Duration,
}

/// Integrates from Gaussian noise at `t = 0` to data at `t = 1`.
/// `dims` is `(channels, height, width)`.
pub fn sample<M, R>(
    model: &M,
    labels: &[u32],
    dims: (usize, usize, usize),
    opts: &SampleOptions,
    rng: &mut R,
) -> Result<SampleOutput>
where
    M: VelocityField + ?Sized,
    R: Rng + ?Sized,
{
    contract!(opts.steps >= 1, "at least one sampling step is required");
    contract!(!labels.is_empty(), "no labels to sample");
    let start = Instant::now();
    let (c, h, w) = dims;
    let x0 = gaussian_noise(&[labels.len(), c, h, w], opts.dtype, rng)?;
    let dt = 1.0 / opts.steps as f64;
    let mut evaluations = 0usize;
    let mut field = |x: &Tensor, t: f64| -> Result<Tensor> {
        evaluations += 1;
        // parameters are tracked, so drop each evaluation's graph
        Ok(guided_velocity(model, x, t, labels, &opts.guidance)?.detach())
    };
    let mut state = SolverState::new(x0, 0.0);
    let mut trajectory = Vec::new();
    let mut diverged = false;
    for _ in 0..opts.steps {
        let v = field(&state.x, state.t)?;
        if opts.record_trajectory {
            trajectory.push((&state.x + (&v * (1.0 - state.t))?)?);
        }
        state = advance(&state, &v, dt, opts.solver, opts.warmup, &mut field)?;
        if !max_abs(&state.x)?.is_finite() {
            diverged = true;
            break;
        }
    }
    let raw = state.x;
    let max_abs = max_abs(&raw)?;
    diverged |= max_abs > DIVERGENCE_THRESHOLD;
    let images = if max_abs.is_finite() {
        raw.clamp(-1.0, 1.0)?
    } else {
        raw.zeros_like()?
    };
    Ok(SampleOutput {
        images,
        raw,
        trajectory,
        max_abs,
        diverged,
        evaluations,
        elapsed: start.elapsed(),
    })
}

fn max_abs(x: &Tensor) -> Result<f64> {
    let v = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(v.iter().try_fold(0.0f64, |m, a| a.is_finite().then(|| m.max(a.abs()))).unwrap_or(f64::INFINITY))
}
