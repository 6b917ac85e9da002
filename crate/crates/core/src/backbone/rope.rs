//! 2-D rotary position encoding. The first half of each head rotates with the
//! token's grid row, the second half with its column.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::params::host_tensor;

#[derive(Debug, Clone)]
pub struct Rope2d {
    cos: Tensor,
    sin: Tensor,
    head_dim: usize,
}

impl Rope2d {
    pub fn for_grid(grid_h: usize, grid_w: usize, head_dim: usize, theta: f64, dtype: DType) -> Result<Self> {
        let positions: Vec<(f64, f64)> = (0..grid_h * grid_w)
            .map(|n| ((n / grid_w) as f64, (n % grid_w) as f64))
            .collect();
        Self::from_positions(&positions, head_dim, theta, dtype)
    }

    pub fn from_positions(positions: &[(f64, f64)], head_dim: usize, theta: f64, dtype: DType) -> Result<Self> {
        if head_dim % 4 != 0 {
            return Err(Error::Contract(format!("2-D rotary needs head_dim % 4 == 0, got {head_dim}")));
        }
        let quarter = head_dim / 4;
        let freqs: Vec<f64> = (0..quarter)
            .map(|i| theta.powf(-(i as f64) / quarter as f64))
            .collect();
        let n = positions.len();
        let mut cos = Vec::with_capacity(n * head_dim);
        let mut sin = Vec::with_capacity(n * head_dim);
        for &(r, c) in positions {
            for axis in [r, c] {
                for _ in 0..2 {
                    for f in &freqs {
                        cos.push((axis * f).cos());
                        sin.push((axis * f).sin());
                    }
                }
            }
        }
        Ok(Self {
            cos: host_tensor(cos, (n, head_dim), dtype)?,
            sin: host_tensor(sin, (n, head_dim), dtype)?,
            head_dim,
        })
    }

    /// Rotates `x` of shape `B×H×N×head_dim`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let dh = x.dim(D::Minus1)?;
        if dh != self.head_dim || x.dim(D::Minus2)? != self.cos.dim(0)? {
            return Err(Error::Contract(format!(
                "rotary table {:?} does not fit input {:?}",
                self.cos.dims(),
                x.dims()
            )));
        }
        let q = dh / 4;
        let q0 = x.narrow(D::Minus1, 0, q)?;
        let q1 = x.narrow(D::Minus1, q, q)?;
        let q2 = x.narrow(D::Minus1, 2 * q, q)?;
        let q3 = x.narrow(D::Minus1, 3 * q, q)?;
        let rotated = Tensor::cat(&[&q1.neg()?, &q0, &q3.neg()?, &q2], D::Minus1)?;
        Ok((x.broadcast_mul(&self.cos)? + rotated.broadcast_mul(&self.sin)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::gaussian_noise;
    use rand::SeedableRng;

    fn logits(rope: &Rope2d, q: &Tensor, k: &Tensor) -> Vec<f64> {
        let q = rope.apply(q).unwrap();
        let k = rope.apply(k).unwrap();
        q.matmul(&k.t().unwrap()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn logits_depend_only_on_relative_offsets() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let q = gaussian_noise(&[1, 2, 6, 16], DType::F64, &mut rng).unwrap();
        let k = gaussian_noise(&[1, 2, 6, 16], DType::F64, &mut rng).unwrap();
        let base: Vec<(f64, f64)> = (0..6).map(|n| ((n / 3) as f64, (n % 3) as f64)).collect();
        let shifted: Vec<(f64, f64)> = base.iter().map(|(r, c)| (r + 5.0, c - 2.0)).collect();
        let a = logits(&Rope2d::from_positions(&base, 16, 100.0, DType::F64).unwrap(), &q, &k);
        let b = logits(&Rope2d::from_positions(&shifted, 16, 100.0, DType::F64).unwrap(), &q, &k);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn rotation_preserves_norm_and_origin_is_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = gaussian_noise(&[1, 1, 4, 8], DType::F64, &mut rng).unwrap();
        let rope = Rope2d::for_grid(2, 2, 8, 10.0, DType::F64).unwrap();
        let y = rope.apply(&x).unwrap();
        let nx = x.sqr().unwrap().sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let ny = y.sqr().unwrap().sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in nx.iter().zip(&ny) {
            assert!((a - b).abs() < 1e-10);
        }
        let x0 = x.narrow(2, 0, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let y0 = y.narrow(2, 0, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(x0, y0);
    }

    #[test]
    fn rejects_bad_head_dim() {
        assert!(Rope2d::for_grid(2, 2, 6, 10.0, DType::F32).is_err());
    }
}
