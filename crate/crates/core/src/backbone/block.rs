//! One AdaLN-modulated transformer block: RMSNorm, rotary self-attention and a
//! SwiGLU feed-forward, each added back through a condition-dependent gate.

use candle_core::Tensor;

use crate::error::{contract, Result};
use crate::ops::{rms_norm, softmax_last, Linear};
use crate::params::{Init, ParamStore};

use super::rope::Rope2d;

#[derive(Debug, Clone)]
pub struct Attention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(store: &ParamStore, hidden: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(&store.pp("qkv"), hidden, 3 * hidden, false)?,
            out: Linear::new(&store.pp("out"), hidden, hidden, false)?,
            heads,
        })
    }

    /// Self-attention within each sample; `x` is `B×N×D`.
    pub fn forward(&self, x: &Tensor, rope: &Rope2d) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, dh))?
            .permute(vec![2, 0, 3, 1, 4])?;
        let q = rope.apply(&qkv.get(0)?.contiguous()?)?;
        let k = rope.apply(&qkv.get(1)?.contiguous()?)?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let probs = softmax_last(&scores)?;
        let y = probs.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?;
        self.out.forward(&y)
    }
}

#[derive(Debug, Clone)]
pub struct SwiGlu {
    gate: Linear,
    up: Linear,
    down: Linear,
}

impl SwiGlu {
    pub fn new(store: &ParamStore, hidden: usize, inner: usize) -> Result<Self> {
        Ok(Self {
            gate: Linear::new(&store.pp("gate"), hidden, inner, false)?,
            up: Linear::new(&store.pp("up"), hidden, inner, false)?,
            down: Linear::new(&store.pp("down"), inner, hidden, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = (self.gate.forward(x)?.silu()? * self.up.forward(x)?)?;
        self.down.forward(&h)
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    attn: Attention,
    ffn: SwiGlu,
    /// `D → 6D`: shift/scale/gate for the attention and FFN branches.
    modulation: Linear,
    hidden: usize,
}

fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(rms_norm(x)?.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)?)
}

impl Block {
    pub fn new(store: &ParamStore, hidden: usize, heads: usize, ffn_hidden: usize) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(&store.pp("attn"), hidden, heads)?,
            ffn: SwiGlu::new(&store.pp("ffn"), hidden, ffn_hidden)?,
            modulation: Linear::with_init(&store.pp("adaln"), hidden, 6 * hidden, true, Init::Zeros)?,
            hidden,
        })
    }

    /// `x` is `B×N×D`, `cond` is the combined `B×D` condition vector.
    pub fn forward(&self, x: &Tensor, cond: &Tensor, rope: &Rope2d) -> Result<Tensor> {
        let (b, _, d) = x.dims3()?;
        contract!(d == self.hidden, "block expects width {}, got {d}", self.hidden);
        contract!(
            cond.dims() == [b, d],
            "condition shape {:?} does not match batch {b} x {d}",
            cond.dims()
        );
        let m = self.modulation.forward(&cond.silu()?)?.reshape((b, 6, d))?;
        let part = |i: usize| -> Result<Tensor> { Ok(m.narrow(1, i, 1)?) };
        let (shift1, scale1, gate1) = (part(0)?, part(1)?, part(2)?);
        let (shift2, scale2, gate2) = (part(3)?, part(4)?, part(5)?);

        let h = self.attn.forward(&modulate(x, &shift1, &scale1)?, rope)?;
        let x = (x + h.broadcast_mul(&gate1)?)?;
        let h = self.ffn.forward(&modulate(&x, &shift2, &scale2)?)?;
        Ok((&x + h.broadcast_mul(&gate2)?)?)
    }
}
