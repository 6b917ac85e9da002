use std::f64::consts::PI;

use candle_core::{DType, Tensor};

use crate::config::EncodingMode;
use crate::error::{Error, Result};
use crate::params::host_tensor;

/// Intra-patch coordinate encoding.
///
/// Pixel `(i, j)` of a `K×K` patch sits at `((i + 0.5) / K, (j + 0.5) / K)`,
/// so a finer patch samples the same unit square more densely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoordEncoding {
    pub mode: EncodingMode,
    /// DCT: frequencies 1..=max_freq per axis. Sin/cos: octaves 0..max_freq.
    pub max_freq: usize,
}

impl CoordEncoding {
    pub fn new(mode: EncodingMode, max_freq: usize) -> Result<Self> {
        if max_freq == 0 {
            return Err(Error::Config("encoding needs at least one frequency".into()));
        }
        Ok(Self { mode, max_freq })
    }

    pub fn pe_dim(&self) -> usize {
        match self.mode {
            EncodingMode::Dct => self.max_freq * self.max_freq,
            EncodingMode::Sincos => 4 * self.max_freq,
        }
    }

    /// Features at one normalized coordinate pair.
    pub fn features_at(&self, u: f64, v: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.pe_dim());
        match self.mode {
            EncodingMode::Dct => {
                for k1 in 1..=self.max_freq {
                    let a = (k1 as f64 * PI * u).cos();
                    for k2 in 1..=self.max_freq {
                        out.push(a * (k2 as f64 * PI * v).cos());
                    }
                }
            }
            EncodingMode::Sincos => {
                for coord in [u, v] {
                    for l in 0..self.max_freq {
                        let arg = (1u64 << l) as f64 * PI * coord;
                        out.push(arg.sin());
                        out.push(arg.cos());
                    }
                }
            }
        }
        out
    }

    /// Row-major `K·K × pe_dim` table over the patch's pixel centers.
    pub fn grid_values(&self, patch: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(patch * patch * self.pe_dim());
        for i in 0..patch {
            for j in 0..patch {
                let u = (i as f64 + 0.5) / patch as f64;
                let v = (j as f64 + 0.5) / patch as f64;
                out.extend(self.features_at(u, v));
            }
        }
        out
    }
}

/// `K×K×pe_dim` encoding tensor for a patch of size `patch`.
pub fn encode_coords(enc: &CoordEncoding, patch: usize, dtype: DType) -> Result<Tensor> {
    if patch == 0 {
        return Err(Error::Geometry("patch size must be >= 1".into()));
    }
    host_tensor(enc.grid_values(patch), (patch, patch, enc.pe_dim()), dtype)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dct_lowest_frequency_vanishes_at_center() {
        let enc = CoordEncoding::new(EncodingMode::Dct, 5).unwrap();
        let k = 5;
        let t = encode_coords(&enc, k, DType::F64).unwrap();
        let v = t.to_vec3::<f64>().unwrap();
        // centre pixel of an odd patch sits at (0.5, 0.5); cos(pi/2)^2 ~ 0
        assert!(v[2][2][0].abs() < 1e-15);
        // symmetric under i <-> j for channels with k1 == k2
        for i in 0..k {
            for j in 0..k {
                for kk in 0..5 {
                    let ch = kk * 5 + kk;
                    assert!((v[i][j][ch] - v[j][i][ch]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn sincos_at_origin() {
        let enc = CoordEncoding::new(EncodingMode::Sincos, 6).unwrap();
        let f = enc.features_at(0.0, 0.0);
        assert_eq!(f.len(), 24);
        for pair in f.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
    }

    #[test]
    fn sincos_layout_is_axis_major() {
        let enc = CoordEncoding::new(EncodingMode::Sincos, 2).unwrap();
        let f = enc.features_at(0.25, 0.0);
        let s = (PI * 0.25).sin();
        assert!((f[0] - s).abs() < 1e-15 && (f[1] - s).abs() < 1e-15);
        assert!((f[2] - 1.0).abs() < 1e-15 && f[3].abs() < 1e-15);
        assert_eq!(&f[4..], &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn dct_gram_matrix_is_diagonal() {
        // Independent brute force over the 64 half-integer grid points.
        let k = 8;
        let enc = CoordEncoding::new(EncodingMode::Dct, 8).unwrap();
        let table = enc.grid_values(k);
        let dim = enc.pe_dim();
        let mut worst: f64 = 0.0;
        for a in 0..dim {
            for b in 0..dim {
                if a == b {
                    continue;
                }
                let g: f64 = (0..k * k).map(|p| table[p * dim + a] * table[p * dim + b]).sum();
                worst = worst.max(g.abs());
            }
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn dims_and_errors() {
        assert_eq!(CoordEncoding::new(EncodingMode::Dct, 8).unwrap().pe_dim(), 64);
        assert_eq!(CoordEncoding::new(EncodingMode::Sincos, 8).unwrap().pe_dim(), 32);
        assert!(CoordEncoding::new(EncodingMode::Dct, 0).is_err());
        let enc = CoordEncoding::new(EncodingMode::Dct, 2).unwrap();
        assert!(encode_coords(&enc, 0, DType::F32).is_err());
        assert_eq!(encode_coords(&enc, 3, DType::F32).unwrap().dims(), &[3, 3, 4]);
    }
}
