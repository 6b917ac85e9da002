//! Decoder-head timing: neural-field head against a linear head on the same
//! trunk, token grid and patch size.

use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{HeadKind, TrainConfig};
use crate::error::{contract, Error, Result};
use crate::flow::gaussian_noise;
use crate::model::{Head, PixNerd};
use crate::params::ParamStore;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub patch: usize,
    pub tokens: usize,
    pub hidden: usize,
    pub depth: usize,
    pub batch: usize,
    pub repeats: usize,
    pub output_shape: Vec<usize>,
    pub nerf_head_ms: f64,
    pub linear_head_ms: f64,
    /// `nerf_head_ms / linear_head_ms`.
    pub head_ratio: f64,
    pub nerf_total_ms: f64,
    pub linear_total_ms: f64,
    /// Full forward pass (trunk plus head) ratio.
    pub total_ratio: f64,
}

impl BenchReport {
    pub fn summary(&self) -> String {
        format!(
            "patch {} tokens {} hidden {} depth {}: head {:.2} ms vs {:.2} ms (ratio {:.2}), \
             total {:.2} ms vs {:.2} ms (ratio {:.3})",
            self.patch,
            self.tokens,
            self.hidden,
            self.depth,
            self.nerf_head_ms,
            self.linear_head_ms,
            self.head_ratio,
            self.nerf_total_ms,
            self.linear_total_ms,
            self.total_ratio
        )
    }
}

fn median_ms<F: FnMut() -> Result<Tensor>>(repeats: usize, mut f: F) -> Result<(f64, Tensor)> {
    let mut out = f()?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        out = f()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok((times[times.len() / 2], out))
}

/// `tokens` must be a perfect square; images are `√tokens · patch` pixels on a side.
pub fn bench_heads(base: &TrainConfig, patch: usize, tokens: usize, batch: usize, repeats: usize) -> Result<BenchReport> {
    let side = (tokens as f64).sqrt().round() as usize;
    if side * side != tokens || tokens == 0 {
        return Err(Error::Config(format!("bench tokens must be a positive square, got {tokens}")));
    }
    contract!(batch >= 1 && repeats >= 1, "bench needs batch >= 1 and repeats >= 1");
    let mut cfg = base.clone();
    cfg.model.patch = patch;
    cfg.model.image_h = side * patch;
    cfg.model.image_w = side * patch;
    cfg.field.max_freq = 0;
    let mut nerf_cfg = cfg.clone();
    nerf_cfg.model.head = HeadKind::Nerf;
    let mut lin_cfg = cfg.clone();
    lin_cfg.model.head = HeadKind::Linear;
    let dtype = DType::F32;
    let nerf = PixNerd::new(&ParamStore::new(dtype, cfg.train.seed), &nerf_cfg)?;
    let linear = PixNerd::new(&ParamStore::new(dtype, cfg.train.seed), &lin_cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let x = gaussian_noise(&[batch, cfg.model.channels, side * patch, side * patch], dtype, &mut rng)?;
    let times = vec![0.5; batch];
    let labels: Vec<u32> = (0..batch as u32).map(|i| i % cfg.model.num_classes as u32).collect();

    let trunk = nerf.backbone().forward(&x, &times, &labels)?;
    contract!(trunk.last_hidden.dims()[1] == tokens, "trunk produced {:?}", trunk.last_hidden.dims());
    let (nerf_head_ms, v_nerf) = median_ms(repeats, || match nerf.head() {
        Head::Nerf(h) => h.forward(&trunk.last_hidden, &x, &trunk.grid),
        Head::Linear(_) => unreachable!("nerf config"),
    })?;
    let (linear_head_ms, v_lin) = median_ms(repeats, || match linear.head() {
        Head::Linear(h) => h.forward(&trunk.last_hidden, &trunk.grid),
        Head::Nerf(_) => unreachable!("linear config"),
    })?;
    contract!(v_nerf.dims() == v_lin.dims(), "head outputs differ: {:?} vs {:?}", v_nerf.dims(), v_lin.dims());
    let (nerf_total_ms, _) = median_ms(repeats, || Ok(nerf.forward(&x, &times, &labels)?.velocity))?;
    let (linear_total_ms, _) = median_ms(repeats, || Ok(linear.forward(&x, &times, &labels)?.velocity))?;
    Ok(BenchReport {
        patch,
        tokens,
        hidden: cfg.model.hidden,
        depth: cfg.model.depth,
        batch,
        repeats,
        output_shape: v_nerf.dims().to_vec(),
        nerf_head_ms,
        linear_head_ms,
        head_ratio: nerf_head_ms / linear_head_ms,
        nerf_total_ms,
        linear_total_ms,
        total_ratio: nerf_total_ms / linear_total_ms,
    })
}
