use std::collections::VecDeque;

use candle_core::Tensor;

use super::SolverKind;
use crate::error::{contract, Error, Result};

/// Maximum number of past velocities kept by a [`SolverState`].
pub const HISTORY_CAPACITY: usize = 3;

/// Slack allowed when comparing times and step sizes.
const TIME_TOL: f64 = 1e-9;

/// How Adams methods fill their history before the full order is available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Warmup {
    /// Take the highest Adams order the history supports (Euler first).
    #[default]
    LowerOrder,
    /// Take classical Runge–Kutta steps until the history is full.
    RungeKutta4,
}

#[derive(Debug, Clone)]
pub struct SolverState {
    pub x: Tensor,
    pub t: f64,
    /// Past `(t, v)` pairs, oldest first.
    pub history: VecDeque<(f64, Tensor)>,
    pub step_index: usize,
    /// Step size fixed by the first multistep update.
    pub step: Option<f64>,
}

impl SolverState {
    pub fn new(x: Tensor, t: f64) -> Self {
        Self {
            x,
            t,
            history: VecDeque::with_capacity(HISTORY_CAPACITY),
            step_index: 0,
            step: None,
        }
    }

    fn advanced(&self, x: Tensor, h: f64, v: &Tensor, keep: usize) -> Self {
        let mut history = self.history.clone();
        history.push_back((self.t, v.clone()));
        while history.len() > keep {
            history.pop_front();
        }
        let t = self.t + h;
        Self {
            x,
            t: if (t - 1.0).abs() <= TIME_TOL { 1.0 } else { t },
            history,
            step_index: self.step_index + 1,
            step: self.step,
        }
    }

    fn check_step(&self, h: f64) -> Result<()> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Domain(format!("step size must be positive, got {h}")));
        }
        if self.t + h > 1.0 + TIME_TOL {
            return Err(Error::Domain(format!("step of {h} from t={} passes t=1", self.t)));
        }
        Ok(())
    }

    fn check_uniform(&mut self, h: f64) -> Result<()> {
        match self.step {
            Some(s) => contract!(
                (s - h).abs() <= TIME_TOL * s.max(1.0),
                "multistep update with h={h} on a trajectory using h={s}"
            ),
            None => self.step = Some(h),
        }
        Ok(())
    }
}

/// Adams–Bashforth weights for order `q`, newest velocity first.
pub fn adams_coefficients(q: usize) -> &'static [f64] {
    const C1: [f64; 1] = [1.0];
    const C2: [f64; 2] = [3.0 / 2.0, -1.0 / 2.0];
    const C3: [f64; 3] = [23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0];
    const C4: [f64; 4] = [55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0];
    match q {
        1 => &C1,
        2 => &C2,
        3 => &C3,
        4 => &C4,
        _ => panic!("no Adams-Bashforth coefficients for order {q}"),
    }
}

/// `x ← x + h·v`, `t ← t + h`.
pub fn euler_step(state: &SolverState, v: &Tensor, h: f64) -> Result<SolverState> {
    state.check_step(h)?;
    let x = (&state.x + (v * h)?)?;
    Ok(state.advanced(x, h, v, HISTORY_CAPACITY))
}

/// Adams–Bashforth step of the given order, falling back to the highest
/// order the history supports.
pub fn adams_step(state: &SolverState, v: &Tensor, h: f64, order: usize) -> Result<SolverState> {
    contract!((1..=4).contains(&order), "Adams-Bashforth order {order} is not in 1..=4");
    state.check_step(h)?;
    let mut state = state.clone();
    state.check_uniform(h)?;
    let q = order.min(state.history.len() + 1);
    let coeffs = adams_coefficients(q);
    let mut slope = (v * coeffs[0])?;
    for (i, c) in coeffs.iter().enumerate().skip(1) {
        let past = &state.history[state.history.len() - i].1;
        slope = (slope + (past * *c)?)?;
    }
    let x = (&state.x + (slope * h)?)?;
    Ok(state.advanced(x, h, v, order - 1))
}

/// Classical fourth-order Runge–Kutta step. `v` is the velocity at the current
/// state; it is stored in the history like any other step.
pub fn rk4_step<F>(state: &SolverState, v: &Tensor, h: f64, field: &mut F) -> Result<SolverState>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    state.check_step(h)?;
    let mut state = state.clone();
    state.check_uniform(h)?;
    let (x, t) = (&state.x, state.t);
    let k2 = field(&(x + (v * (h / 2.0))?)?, t + h / 2.0)?;
    let k3 = field(&(x + (&k2 * (h / 2.0))?)?, t + h / 2.0)?;
    let k4 = field(&(x + (&k3 * h)?)?, t + h)?;
    let sum = ((v + &k4)? + ((k2 + k3)? * 2.0)?)?;
    let next = (x + (sum * (h / 6.0))?)?;
    Ok(state.advanced(next, h, v, HISTORY_CAPACITY))
}

/// One step of `kind` given the velocity `v` already evaluated at the state.
pub fn advance<F>(
    state: &SolverState,
    v: &Tensor,
    h: f64,
    kind: SolverKind,
    warmup: Warmup,
    field: &mut F,
) -> Result<SolverState>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    match kind {
        SolverKind::Euler => euler_step(state, v, h),
        SolverKind::Adams2 | SolverKind::Adams4 => {
            let order = kind.order();
            if warmup == Warmup::RungeKutta4 && state.history.len() + 1 < order {
                let mut next = rk4_step(state, v, h, field)?;
                while next.history.len() > order - 1 {
                    next.history.pop_front();
                }
                Ok(next)
            } else {
                adams_step(state, v, h, order)
            }
        }
    }
}

/// Integrates `dx/dt = field(x, t)` from `t = 0` to `t = 1` in `steps` uniform steps.
pub fn integrate<F>(x0: &Tensor, steps: usize, kind: SolverKind, warmup: Warmup, mut field: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    contract!(steps >= 1, "at least one step is required");
    let h = 1.0 / steps as f64;
    let mut state = SolverState::new(x0.clone(), 0.0);
    for _ in 0..steps {
        let v = field(&state.x, state.t)?;
        state = advance(&state, &v, h, kind, warmup, &mut field)?;
    }
    Ok(state.x)
}
