//! Pixel-space diffusion with a per-patch neural-field decoder.
//!
//! A rectified-flow diffusion transformer whose final projection is replaced
//! by a small MLP per patch, with weights predicted from that patch's hidden
//! state, evaluated on intra-patch coordinate encodings and noisy pixels.

pub mod backbone;
pub mod config;
mod error;
pub mod flow;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod nerf_head;
pub mod ops;
pub mod params;
pub mod solver;
pub mod trainer;

pub use error::{Error, Result};
