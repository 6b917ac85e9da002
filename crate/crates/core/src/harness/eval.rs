//! Desk-scale evaluation: per-class PSNR against training images and a
//! Fréchet distance between pixel colour distributions. The latter is not
//! comparable to FID.

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::error::{contract, Result};
use crate::ops::resize_bilinear;
use crate::solver::{sample, SampleOptions, VelocityField};

/// Highest PSNR reported, reached when images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

/// PSNR in dB for images in `[-1, 1]` (peak-to-peak range 2).
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    contract!(a.dims() == b.dims(), "psnr of {:?} against {:?}", a.dims(), b.dims());
    let mse = (a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?
        .sqr()?
        .mean_all()?
        .to_scalar::<f64>()?;
    Ok((10.0 * (4.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean and covariance of pixel colours of a `B × C × H × W` batch.
pub fn colour_moments(images: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (b, c, h, w) = images.dims4()?;
    let x = images
        .to_dtype(DType::F64)?
        .permute((1, 0, 2, 3))?
        .reshape((c, b * h * w))?
        .to_vec2::<f64>()?;
    let n = (b * h * w) as f64;
    let mean = DVector::from_iterator(c, x.iter().map(|row| row.iter().sum::<f64>() / n));
    let mut cov = DMatrix::zeros(c, c);
    for i in 0..c {
        for j in i..c {
            let s: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - mean[i]) * (b - mean[j])).sum();
            cov[(i, j)] = s / (n - 1.0).max(1.0);
            cov[(j, i)] = cov[(i, j)];
        }
    }
    Ok((mean, cov))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `|μ₁ − μ₂|² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^½)` between Gaussian fits.
pub fn frechet_distance(m1: &DVector<f64>, c1: &DMatrix<f64>, m2: &DVector<f64>, c2: &DMatrix<f64>) -> f64 {
    let s1 = sqrt_psd(c1);
    let inner = &s1 * c2 * &s1;
    let cross = sqrt_psd(&((&inner + inner.transpose()) * 0.5)).trace();
    ((m1 - m2).norm_squared() + c1.trace() + c2.trace() - 2.0 * cross).max(0.0)
}

pub fn frechet_rgb(generated: &Tensor, reference: &Tensor) -> Result<f64> {
    let (m1, c1) = colour_moments(generated)?;
    let (m2, c2) = colour_moments(reference)?;
    Ok(frechet_distance(&m1, &c1, &m2, &c2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPsnr {
    pub label: u32,
    pub psnr_db: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub solver: String,
    pub steps: usize,
    pub cfg_scale: f64,
    pub cfg_interval: (f64, f64),
    pub resolution: (usize, usize),
    pub per_class_psnr: Vec<ClassPsnr>,
    pub mean_psnr_db: f64,
    pub min_psnr_db: f64,
    /// Pixel-colour Fréchet distance to the dataset; not comparable to FID.
    pub frechet_rgb: f64,
    pub diverged: bool,
    pub max_abs: f64,
    pub ms_per_step: f64,
    pub ms_per_image: f64,
}

/// Samples one image per class at `resolution` and scores it against that
/// class's first training image. Off-native samples are resized to the
/// dataset resolution before scoring.
pub fn evaluate<M, R>(
    model: &M,
    data: &Dataset,
    resolution: (usize, usize),
    opts: &SampleOptions,
    rng: &mut R,
) -> Result<(EvalReport, Tensor)>
where
    M: VelocityField + ?Sized,
    R: Rng + ?Sized,
{
    let reps = data.class_representatives();
    let labels: Vec<u32> = reps.iter().map(|r| r.0).collect();
    let (_, c, h, w) = data.images.dims4()?;
    let out = sample(model, &labels, (c, resolution.0, resolution.1), opts, rng)?;
    let scored = if resolution == (h, w) {
        out.images.clone()
    } else {
        resize_bilinear(&out.images, h, w)?
    };
    let mut per_class = Vec::with_capacity(reps.len());
    for (i, (label, idx)) in reps.iter().enumerate() {
        let reference = data.image(*idx)?.to_dtype(scored.dtype())?;
        per_class.push(ClassPsnr {
            label: *label,
            psnr_db: psnr(&scored.narrow(0, i, 1)?, &reference)?,
        });
    }
    let mean = per_class.iter().map(|p| p.psnr_db).sum::<f64>() / per_class.len() as f64;
    let min = per_class.iter().map(|p| p.psnr_db).fold(f64::INFINITY, f64::min);
    let ms = out.elapsed.as_secs_f64() * 1e3;
    let report = EvalReport {
        solver: opts.solver.name().into(),
        steps: opts.steps,
        cfg_scale: opts.guidance.scale,
        cfg_interval: (opts.guidance.t_lo, opts.guidance.t_hi),
        resolution,
        per_class_psnr: per_class,
        mean_psnr_db: mean,
        min_psnr_db: min,
        frechet_rgb: frechet_rgb(&scored, &data.images)?,
        diverged: out.diverged,
        max_abs: out.max_abs,
        ms_per_step: ms / opts.steps as f64,
        ms_per_image: ms / labels.len() as f64,
    };
    Ok((report, out.images))
}
