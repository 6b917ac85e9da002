//! 8-bit PNG emission and image ingestion.

use std::path::Path;

use candle_core::{DType, Tensor};
use image::imageops::FilterType;
use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

/// `v ∈ [-1, 1]` → `round((v + 1)·127.5)`; out-of-range values saturate.
pub fn to_u8(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_u8(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

/// Lays out a `B × C × H × W` batch as a row-major grid with `cols` columns.
/// Single-channel images are written as grey.
pub fn render_grid(batch: &Tensor, cols: usize) -> Result<RgbImage> {
    let (b, c, h, w) = batch.dims4()?;
    if c != 1 && c != 3 {
        return Err(Error::Contract(format!("cannot render {c}-channel images")));
    }
    let cols = cols.clamp(1, b.max(1));
    let rows = b.div_ceil(cols);
    let vals = batch.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut img = RgbImage::new((cols * w) as u32, (rows * h) as u32);
    for i in 0..b {
        let (gy, gx) = (i / cols, i % cols);
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| to_u8(vals[((i * c + ch) * h + y) * w + x]);
                let rgb = if c == 3 { [px(0), px(1), px(2)] } else { [px(0); 3] };
                img.put_pixel((gx * w + x) as u32, (gy * h + y) as u32, Rgb(rgb));
            }
        }
    }
    Ok(img)
}

/// Default grid width: the smallest `cols` with `cols² ≥ B`.
pub fn default_cols(b: usize) -> usize {
    (1..=b.max(1)).find(|c| c * c >= b).unwrap_or(1)
}

pub fn emit_png(batch: &Tensor, path: &Path, cols: Option<usize>) -> Result<()> {
    let b = batch.dims4()?.0;
    let img = render_grid(batch, cols.unwrap_or_else(|| default_cols(b)))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// Decodes an image, center-crops it to the target aspect ratio, resizes it
/// and returns `C × H × W` values in `[-1, 1]`.
pub fn load_image(path: &Path, height: usize, width: usize, channels: usize) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (iw, ih) = (img.width() as usize, img.height() as usize);
    if iw == 0 || ih == 0 {
        return Err(Error::Data(format!("{}: empty image", path.display())));
    }
    // Largest centered window with the target aspect ratio.
    let (cw, ch) = if iw * height >= ih * width {
        ((ih * width / height).max(1), ih)
    } else {
        (iw, (iw * height / width).max(1))
    };
    let (x0, y0) = ((iw - cw) / 2, (ih - ch) / 2);
    let cropped = img.crop_imm(x0 as u32, y0 as u32, cw as u32, ch as u32);
    let resized = if (cw, ch) == (width, height) {
        cropped
    } else {
        cropped.resize_exact(width as u32, height as u32, FilterType::Triangle)
    };
    let rgb = resized.to_rgb8();
    let mut out = Vec::with_capacity(channels * height * width);
    for c in 0..channels {
        for y in 0..height {
            for x in 0..width {
                let p = rgb.get_pixel(x as u32, y as u32).0;
                let v = if channels == 3 {
                    p[c]
                } else {
                    ((p[0] as u32 + p[1] as u32 + p[2] as u32) / 3) as u8
                };
                out.push(from_u8(v) as f32);
            }
        }
    }
    Ok(out)
}
