//! Deterministic ODE sampling over a learned velocity field.
//!
//! Time runs from `t = 0` (Gaussian noise) to `t = 1` (data) on a uniform grid.
//! Euler and Adams–Bashforth (orders 2 and 4) integrators are provided, plus
//! classifier-free guidance restricted to a time interval.

mod guidance;
mod multistep;
mod sample;

use std::str::FromStr;

use candle_core::Tensor;

pub use guidance::{combine_guidance, guided_velocity, GuidanceConfig};
pub use multistep::{
    adams_coefficients, adams_step, advance, euler_step, integrate, rk4_step, SolverState, Warmup, HISTORY_CAPACITY,
};
pub use sample::{sample, SampleOptions, SampleOutput, DIVERGENCE_THRESHOLD};

use crate::error::{Error, Result};

/// A (possibly class-conditional) velocity field `v(x, t | label)`.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64, labels: &[u32]) -> Result<Tensor>;
    fn null_label(&self) -> u32;
}

/// Adapter turning a closure `(x, t, labels) -> v` into a [`VelocityField`].
pub struct FnField<F> {
    f: F,
    null: u32,
}

impl<F> FnField<F>
where
    F: Fn(&Tensor, f64, &[u32]) -> Result<Tensor>,
{
    pub fn new(null: u32, f: F) -> Self {
        Self { f, null }
    }
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(&Tensor, f64, &[u32]) -> Result<Tensor>,
{
    fn velocity(&self, x: &Tensor, t: f64, labels: &[u32]) -> Result<Tensor> {
        (self.f)(x, t, labels)
    }

    fn null_label(&self) -> u32 {
        self.null
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Euler,
    Adams2,
    Adams4,
}

impl SolverKind {
    pub fn order(&self) -> usize {
        match self {
            SolverKind::Euler => 1,
            SolverKind::Adams2 => 2,
            SolverKind::Adams4 => 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SolverKind::Euler => "euler",
            SolverKind::Adams2 => "adams2",
            SolverKind::Adams4 => "adams4",
        }
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(SolverKind::Euler),
            "adams2" | "adams-2" => Ok(SolverKind::Adams2),
            "adams4" | "adams-4" => Ok(SolverKind::Adams4),
            other => Err(Error::Config(format!("unknown solver '{other}' (euler, adams2, adams4)"))),
        }
    }
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests;
