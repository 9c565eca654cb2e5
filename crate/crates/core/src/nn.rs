//! Transformer building blocks shared by the encoder towers and the toy LM.
//!
//! Batches are stacked row-wise: a `[Σ len_i, D]` matrix plus the
//! `(start, len)` segment of each sequence. Row-wise layers run over the
//! whole stack at once; attention runs per segment.

use dslab_tensor::param::{ones_param, uniform_param, zeros_param};
use dslab_tensor::Tensor;

use crate::error::{CoreError, Result};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            w: uniform_param(&[d_in, d_out], d_in, rng)?,
            b: zeros_param(&[d_out]),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w)?.add_bias(&self.b)?)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        vec![self.w.clone(), self.b.clone()]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: ones_param(&[d]),
            beta: zeros_param(&[d]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.layer_norm(&self.gamma, &self.beta)?)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        vec![self.gamma.clone(), self.beta.clone()]
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    heads: usize,
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    pub fn new(d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(CoreError::Config(format!("width {d} is not divisible into {heads} heads")));
        }
        Ok(Self {
            heads,
            ln1: LayerNorm::new(d),
            qkv: Linear::new(d, 3 * d, rng)?,
            out: Linear::new(d, d, rng)?,
            ln2: LayerNorm::new(d),
            fc1: Linear::new(d, 4 * d, rng)?,
            fc2: Linear::new(4 * d, d, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor, segments: &[(usize, usize)], causal: bool) -> Result<Tensor> {
        let (_, d) = x.dims2("block")?;
        let dh = d / self.heads;
        let qkv = self.qkv.forward(&self.ln1.forward(x)?)?;
        let mut rows = Vec::with_capacity(segments.len());
        for &(start, len) in segments {
            let seg = qkv.slice_rows(start, len)?;
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let q = seg.slice_cols(h * dh, dh)?;
                let k = seg.slice_cols(d + h * dh, dh)?;
                let v = seg.slice_cols(2 * d + h * dh, dh)?;
                let att = q
                    .matmul(&k.transpose()?)?
                    .scale(1.0 / (dh as f64).sqrt())
                    .softmax_rows(causal)?;
                heads.push(att.matmul(&v)?);
            }
            rows.push(Tensor::concat_cols(&heads)?);
        }
        let attn = self.out.forward(&Tensor::concat_rows(&rows)?)?;
        let x = x.add(&attn)?;
        let mlp = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.gelu())?;
        Ok(x.add(&mlp)?)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        let mut t = self.ln1.tensors();
        t.extend(self.qkv.tensors());
        t.extend(self.out.tensors());
        t.extend(self.ln2.tensors());
        t.extend(self.fc1.tensors());
        t.extend(self.fc2.tensors());
        t
    }
}

pub fn stack_tensors(blocks: &[Block]) -> Vec<Tensor> {
    blocks.iter().flat_map(Block::tensors).collect()
}

/// Consecutive `(start, len)` segments for the given lengths.
pub fn segments(lens: &[usize]) -> Vec<(usize, usize)> {
    let mut start = 0;
    lens.iter()
        .map(|&len| {
            let s = (start, len);
            start += len;
            s
        })
        .collect()
}
