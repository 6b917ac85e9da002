use candle_core::Tensor;

use super::VelocityField;
use crate::error::{Error, Result};

/// Classifier-free guidance applied only for `t` in `[t_lo, t_hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub t_lo: f64,
    pub t_hi: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: 3.5,
            t_lo: 0.1,
            t_hi: 1.0,
        }
    }
}

impl GuidanceConfig {
    pub fn new(scale: f64, t_lo: f64, t_hi: f64) -> Result<Self> {
        if !(scale >= 1.0 && scale.is_finite()) {
            return Err(Error::Domain(format!("guidance scale must be >= 1, got {scale}")));
        }
        if !(0.0 <= t_lo && t_lo < t_hi && t_hi <= 1.0) {
            return Err(Error::Domain(format!(
                "guidance interval [{t_lo}, {t_hi}] must satisfy 0 <= lo < hi <= 1"
            )));
        }
        Ok(Self { scale, t_lo, t_hi })
    }

    pub fn disabled() -> Self {
        Self {
            scale: 1.0,
            t_lo: 0.0,
            t_hi: 1.0,
        }
    }

    pub fn is_active(&self, t: f64) -> bool {
        self.scale != 1.0 && t >= self.t_lo && t <= self.t_hi
    }
}

/// `v_uncond + w·(v_cond − v_uncond)` inside the interval, `v_cond` outside.
pub fn combine_guidance(v_cond: &Tensor, v_uncond: &Tensor, t: f64, g: &GuidanceConfig) -> Result<Tensor> {
    if !g.is_active(t) {
        return Ok(v_cond.clone());
    }
    Ok((v_uncond + ((v_cond - v_uncond)? * g.scale)?)?)
}

/// Guided velocity. Conditional and unconditional branches share one batched
/// model call when guidance is active.
pub fn guided_velocity<M: VelocityField + ?Sized>(
    model: &M,
    x: &Tensor,
    t: f64,
    labels: &[u32],
    g: &GuidanceConfig,
) -> Result<Tensor> {
    if !g.is_active(t) {
        return model.velocity(x, t, labels);
    }
    let b = labels.len();
    let both = Tensor::cat(&[x, x], 0)?;
    let mut all_labels = labels.to_vec();
    all_labels.extend(std::iter::repeat_n(model.null_label(), b));
    let v = model.velocity(&both, t, &all_labels)?;
    let v_cond = v.narrow(0, 0, b)?;
    let v_uncond = v.narrow(0, b, b)?;
    combine_guidance(&v_cond, &v_uncond, t, g)
}
