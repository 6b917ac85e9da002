//! The full velocity model: transformer trunk plus a patch decoder.

use candle_core::Tensor;

use crate::backbone::{Backbone, PatchGrid};
use crate::config::{HeadKind, TrainConfig};
use crate::error::{Error, Result};
use crate::nerf_head::{LinearHead, NerfHead};
use crate::ops::resize_bilinear;
use crate::params::ParamStore;
use crate::solver::VelocityField;

#[derive(Debug, Clone)]
pub enum Head {
    Nerf(NerfHead),
    Linear(LinearHead),
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub velocity: Tensor,
    /// Hidden states of the alignment tap layer.
    pub tap_hidden: Tensor,
}

#[derive(Debug, Clone)]
pub struct PixNerd {
    backbone: Backbone,
    head: Head,
    native: (usize, usize),
}

impl PixNerd {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let backbone = Backbone::new(&store.pp("backbone"), m, cfg.repa.layer)?;
        let head = match m.head {
            HeadKind::Nerf => Head::Nerf(NerfHead::new(&store.pp("head"), m.hidden, m.channels, m.patch, &cfg.field)?),
            HeadKind::Linear => Head::Linear(LinearHead::new(
                &store.pp("head"),
                m.hidden,
                m.patch * m.patch * m.channels,
            )?),
        };
        Ok(Self {
            backbone,
            head,
            native: (m.image_h, m.image_w),
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn native_resolution(&self) -> (usize, usize) {
        self.native
    }

    /// Training-resolution forward pass.
    pub fn forward(&self, x_t: &Tensor, times: &[f64], labels: &[u32]) -> Result<ModelOutput> {
        let out = self.backbone.forward(x_t, times, labels)?;
        let velocity = match &self.head {
            Head::Nerf(h) => h.forward(&out.last_hidden, x_t, &out.grid)?,
            Head::Linear(h) => h.forward(&out.last_hidden, &out.grid)?,
        };
        Ok(ModelOutput {
            velocity,
            tap_hidden: out.tap_hidden,
        })
    }

    /// Velocity at any resolution that tiles the native token grid. The trunk
    /// sees `x` resampled to the native size; the field decodes at full size.
    pub fn velocity_at(&self, x: &Tensor, times: &[f64], labels: &[u32]) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if (h, w) == self.native {
            return Ok(self.forward(x, times, labels)?.velocity);
        }
        let head = match &self.head {
            Head::Nerf(h) => h,
            Head::Linear(_) => {
                return Err(Error::Geometry(format!(
                    "a linear head only decodes at {}x{}",
                    self.native.0, self.native.1
                )))
            }
        };
        let low = resize_bilinear(x, self.native.0, self.native.1)?;
        let out = self.backbone.forward(&low, times, labels)?;
        let weights = head.predict_weights(&out.last_hidden)?;
        head.decode_at_resolution(&weights, &out.grid, (h, w), x)
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        let c = self.backbone.config();
        PatchGrid::new(c.image_h, c.image_w, c.patch, c.channels)
    }
}

impl VelocityField for PixNerd {
    fn velocity(&self, x: &Tensor, t: f64, labels: &[u32]) -> Result<Tensor> {
        let times = vec![t; labels.len()];
        self.velocity_at(x, &times, labels)
    }

    fn null_label(&self) -> u32 {
        self.backbone.null_label()
    }
}
