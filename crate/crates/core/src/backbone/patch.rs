use candle_core::Tensor;

use crate::error::{Error, Result};

/// Tiling of a `C×H×W` image into non-overlapping `K×K` patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: usize, channels: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Geometry("patch size must be >= 1".into()));
        }
        if height % patch != 0 || width % patch != 0 {
            return Err(Error::Geometry(format!(
                "{height}x{width} image is not divisible into {patch}x{patch} patches"
            )));
        }
        Ok(Self {
            patch,
            grid_h: height / patch,
            grid_w: width / patch,
            channels,
        })
    }

    pub fn for_image(x: &Tensor, patch: usize) -> Result<Self> {
        let (_, c, h, w) = x.dims4()?;
        Self::new(h, w, patch, c)
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn height(&self) -> usize {
        self.grid_h * self.patch
    }

    pub fn width(&self) -> usize {
        self.grid_w * self.patch
    }

    /// Values per token: `K·K·C`.
    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Same token grid with a different patch size (resolution interpolation).
    pub fn with_patch(&self, patch: usize) -> Self {
        Self { patch, ..*self }
    }

    /// Token `n`'s (row, column) on the grid.
    pub fn position(&self, n: usize) -> (usize, usize) {
        (n / self.grid_w, n % self.grid_w)
    }
}

/// `B×C×H×W → B×N×(K·K·C)`; tokens row-major over the grid, each token laid
/// out as `(row-in-patch, col-in-patch, channel)`.
pub fn patchify(x: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c != grid.channels || h != grid.height() || w != grid.width() {
        return Err(Error::Geometry(format!(
            "image {c}x{h}x{w} does not match grid {:?}",
            grid
        )));
    }
    let k = grid.patch;
    let t = x
        .reshape(vec![b, c, grid.grid_h, k, grid.grid_w, k])?
        .permute(vec![0, 2, 4, 3, 5, 1])?
        .contiguous()?;
    Ok(t.reshape((b, grid.tokens(), grid.token_dim()))?)
}

pub fn unpatchify(tokens: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
    let (b, n, d) = tokens.dims3()?;
    if n != grid.tokens() || d != grid.token_dim() {
        return Err(Error::Geometry(format!(
            "token tensor {b}x{n}x{d} does not match grid {:?}",
            grid
        )));
    }
    let k = grid.patch;
    let t = tokens
        .reshape(vec![b, grid.grid_h, grid.grid_w, k, k, grid.channels])?
        .permute(vec![0, 5, 1, 3, 2, 4])?
        .contiguous()?;
    Ok(t.reshape((b, grid.channels, grid.height(), grid.width()))?)
}
