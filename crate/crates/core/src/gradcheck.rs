//! Central finite-difference gradient checking against candle's reverse mode.
//!
//! The checker only ever evaluates the scalar loss; it never looks at how the
//! analytic gradient was produced.

use candle_core::{DType, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::{host_tensor, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn params_checked(&self) -> usize {
        let mut names: Vec<&str> = self.entries.iter().map(|e| e.param.as_str()).collect();
        names.dedup();
        names.len()
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Overwrites every parameter with `N(0, std)` draws so that gated branches
/// (zero-initialized at construction) carry gradient.
pub fn randomize(store: &ParamStore, std: f64, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).map_err(|e| Error::Domain(e.to_string()))?;
    for (_, var) in store.vars() {
        let n = var.elem_count();
        let vals: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        var.set(&host_tensor(vals, var.shape().clone(), var.dtype())?)?;
    }
    Ok(())
}

fn set_entry(var: &Var, base: &[f64], index: usize, value: f64) -> Result<()> {
    let mut v = base.to_vec();
    v[index] = value;
    var.set(&host_tensor(v, var.shape().clone(), var.dtype())?)?;
    Ok(())
}

/// Compares analytic gradients of `loss` with central differences of step
/// `h`, for at most `per_param` randomly chosen entries of every parameter.
pub fn check_gradients<F>(
    store: &ParamStore,
    loss: F,
    h: f64,
    per_param: usize,
    floor: f64,
    seed: u64,
) -> Result<GradReport>
where
    F: Fn() -> Result<Tensor>,
{
    if store.dtype() != DType::F64 {
        return Err(Error::Contract("gradient checks require an f64 store".into()));
    }
    let grads = loss()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    for (name, var) in store.vars() {
        let n = var.elem_count();
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; n],
        };
        let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            let mut p = sample(&mut rng, n, per_param).into_vec();
            p.sort_unstable();
            p
        };
        for i in picks {
            set_entry(&var, &base, i, base[i] + h)?;
            let up = crate::ops::scalar(&loss()?)?;
            set_entry(&var, &base, i, base[i] - h)?;
            let down = crate::ops::scalar(&loss()?)?;
            set_entry(&var, &base, i, base[i])?;
            let numeric = (up - down) / (2.0 * h);
            report.entries.push(GradEntry {
                param: name.clone(),
                index: i,
                analytic: analytic[i],
                numeric,
                rel_error: relative_error(analytic[i], numeric, floor),
            });
        }
    }
    Ok(report)
}
