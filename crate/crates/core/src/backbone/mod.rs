//! Diffusion transformer trunk.
//!
//! Pixels are cut into `K×K` patches, linearly embedded, and passed through a
//! stack of AdaLN blocks conditioned on `y + t_emb`. Positions enter only
//! through 2-D rotary encoding, so with zero-initialized gates the trunk is
//! the identity on the embedded patch tokens.

mod block;
mod embed;
mod patch;
mod rope;

use candle_core::Tensor;

pub use block::{Attention, Block, SwiGlu};
pub use embed::{timestep_features, ConditionEmbedding, LabelEmbedder, TimestepEmbedder};
pub use patch::{patchify, unpatchify, PatchGrid};
pub use rope::Rope2d;

use crate::config::ModelConfig;
use crate::error::{contract, Error, Result};
use crate::ops::Linear;
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub last_hidden: Tensor,
    /// Output of block `tap_layer` (1-based, post-residual).
    pub tap_hidden: Tensor,
    pub grid: PatchGrid,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: ModelConfig,
    patch_embed: Linear,
    time: TimestepEmbedder,
    labels: LabelEmbedder,
    blocks: Vec<Block>,
    tap_layer: usize,
}

impl Backbone {
    pub fn new(store: &ParamStore, cfg: &ModelConfig, tap_layer: usize) -> Result<Self> {
        if tap_layer == 0 || tap_layer > cfg.depth {
            return Err(Error::Config(format!(
                "tap layer {tap_layer} must lie in [1, {}]",
                cfg.depth
            )));
        }
        let token_dim = cfg.patch * cfg.patch * cfg.channels;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&store.pp(format!("blocks.{i}")), cfg.hidden, cfg.heads, cfg.ffn_hidden()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed: Linear::new(&store.pp("patch_embed"), token_dim, cfg.hidden, true)?,
            time: TimestepEmbedder::new(&store.pp("time_embed"), cfg.hidden)?,
            labels: LabelEmbedder::new(&store.pp("label_embed"), cfg.num_classes, cfg.hidden)?,
            blocks,
            tap_layer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn null_label(&self) -> u32 {
        self.labels.null_label()
    }

    pub fn condition(&self, times: &[f64], labels: &[u32]) -> Result<ConditionEmbedding> {
        contract!(
            times.len() == labels.len(),
            "{} timesteps for {} labels",
            times.len(),
            labels.len()
        );
        Ok(ConditionEmbedding {
            y: self.labels.forward(labels)?,
            t_emb: self.time.forward(times)?,
        })
    }

    pub fn embed_patches(&self, x: &Tensor) -> Result<(Tensor, PatchGrid)> {
        let grid = PatchGrid::for_image(x, self.cfg.patch)?;
        contract!(
            grid.channels == self.cfg.channels,
            "expected {} channels, got {}",
            self.cfg.channels,
            grid.channels
        );
        Ok((self.patch_embed.forward(&patchify(x, &grid)?)?, grid))
    }

    pub fn rope(&self, grid: &PatchGrid, dtype: candle_core::DType) -> Result<Rope2d> {
        Rope2d::for_grid(grid.grid_h, grid.grid_w, self.cfg.head_dim(), self.cfg.rope_theta, dtype)
    }

    /// Runs the block stack on already-embedded tokens.
    pub fn forward_tokens(
        &self,
        tokens: &Tensor,
        cond: &ConditionEmbedding,
        grid: &PatchGrid,
    ) -> Result<(Tensor, Tensor)> {
        let (_, n, d) = tokens.dims3()?;
        contract!(d == self.cfg.hidden, "token width {d} != hidden {}", self.cfg.hidden);
        contract!(n == grid.tokens(), "{n} tokens for a grid of {}", grid.tokens());
        let rope = self.rope(grid, tokens.dtype())?;
        let c = cond.combined()?;
        let mut x = tokens.clone();
        let mut tap = None;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, &c, &rope)?;
            if i + 1 == self.tap_layer {
                tap = Some(x.clone());
            }
        }
        Ok((x, tap.expect("tap layer validated at construction")))
    }

    pub fn forward(&self, x_t: &Tensor, times: &[f64], labels: &[u32]) -> Result<BackboneOutput> {
        let b = x_t.dims4()?.0;
        contract!(times.len() == b, "{} timesteps for a batch of {b}", times.len());
        let cond = self.condition(times, labels)?;
        let (tokens, grid) = self.embed_patches(x_t)?;
        let (last_hidden, tap_hidden) = self.forward_tokens(&tokens, &cond, &grid)?;
        Ok(BackboneOutput {
            last_hidden,
            tap_hidden,
            grid,
        })
    }
}
