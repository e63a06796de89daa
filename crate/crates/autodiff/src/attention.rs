//! Fused multi-head self-attention over packed sequences.
//!
//! Several independent sequences are stacked row-wise into one `T × 3d`
//! matrix holding queries, keys and values side by side. Each sequence is a
//! [`AttentionBlock`]; tokens only attend within their own block, subject to
//! the block's [`AttentionMask`].

use crate::error::{AutodiffError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMask {
    /// Every token sees every token of the block.
    Full,
    /// The first `prefix` tokens see each other; every later token at
    /// position `i` sees positions `0..=i`. `prefix = 0` is plain causal.
    Causal { prefix: usize },
}

impl AttentionMask {
    /// Exclusive upper bound of the keys visible from query row `i`.
    pub fn visible(&self, i: usize, len: usize) -> usize {
        match *self {
            AttentionMask::Full => len,
            AttentionMask::Causal { prefix } if i < prefix => prefix.min(len),
            AttentionMask::Causal { .. } => i + 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionBlock {
    pub start: usize,
    pub len: usize,
    pub mask: AttentionMask,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub heads: usize,
    pub blocks: Vec<AttentionBlock>,
}

impl AttentionLayout {
    pub fn new(heads: usize, blocks: Vec<AttentionBlock>) -> Self {
        Self { heads, blocks }
    }

    /// Blocks must tile `0..rows` in order.
    pub(crate) fn validate(&self, rows: usize, width: usize) -> Result<()> {
        let bad = |reason: String| AutodiffError::InvalidArgument {
            op: "attention",
            reason,
        };
        if self.heads == 0 || width % self.heads != 0 {
            return Err(bad(format!(
                "width {width} not divisible into {} heads",
                self.heads
            )));
        }
        let mut cursor = 0;
        for b in &self.blocks {
            if b.start != cursor || b.len == 0 {
                return Err(bad(format!("block {b:?} does not continue at row {cursor}")));
            }
            cursor += b.len;
        }
        if cursor != rows {
            return Err(bad(format!("blocks cover {cursor} rows, input has {rows}")));
        }
        Ok(())
    }
}

/// Copies one head's slice of Q, K or V for a block into a dense `len × dh` buffer.
fn gather_head<T: Scalar>(
    qkv: &[T],
    width: usize,
    block: &AttentionBlock,
    column: usize,
    dh: usize,
) -> Vec<T> {
    let stride = 3 * width;
    let mut out = Vec::with_capacity(block.len * dh);
    for r in block.start..block.start + block.len {
        out.extend_from_slice(&qkv[r * stride + column..r * stride + column + dh]);
    }
    out
}

pub(crate) struct AttentionForward<T> {
    pub output: Vec<T>,
    /// Attention probabilities per (block, head), row-major `len × len`.
    pub probs: Vec<Vec<T>>,
}

pub(crate) fn forward<T: Scalar>(
    qkv: &[T],
    rows: usize,
    width: usize,
    layout: &AttentionLayout,
) -> AttentionForward<T> {
    let heads = layout.heads;
    let dh = width / heads;
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut output = vec![T::zero(); rows * width];
    let mut probs = Vec::with_capacity(layout.blocks.len() * heads);
    for block in &layout.blocks {
        let len = block.len;
        for h in 0..heads {
            let q = gather_head(qkv, width, block, h * dh, dh);
            let k = gather_head(qkv, width, block, width + h * dh, dh);
            let v = gather_head(qkv, width, block, 2 * width + h * dh, dh);
            let mut p = vec![T::zero(); len * len];
            T::gemm(len, dh, len, &q, false, &k, true, &mut p, false);
            for i in 0..len {
                let hi = block.mask.visible(i, len);
                let row = &mut p[i * len..(i + 1) * len];
                let mut max = T::neg_infinity();
                for s in row[..hi].iter_mut() {
                    *s = *s * scale;
                    max = max.max(*s);
                }
                let mut total = T::zero();
                for s in row[..hi].iter_mut() {
                    *s = (*s - max).exp();
                    total = total + *s;
                }
                for s in row[..hi].iter_mut() {
                    *s = *s / total;
                }
                row[hi..].iter_mut().for_each(|s| *s = T::zero());
            }
            let mut o = vec![T::zero(); len * dh];
            T::gemm(len, len, dh, &p, false, &v, false, &mut o, false);
            for i in 0..len {
                let r = block.start + i;
                output[r * width + h * dh..r * width + (h + 1) * dh]
                    .copy_from_slice(&o[i * dh..(i + 1) * dh]);
            }
            probs.push(p);
        }
    }
    AttentionForward { output, probs }
}

pub(crate) fn backward<T: Scalar>(
    qkv: &[T],
    grad_out: &[T],
    width: usize,
    layout: &AttentionLayout,
    probs: &[Vec<T>],
) -> Vec<T> {
    let heads = layout.heads;
    let dh = width / heads;
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let stride = 3 * width;
    let mut grad = vec![T::zero(); qkv.len()];
    for (bi, block) in layout.blocks.iter().enumerate() {
        let len = block.len;
        for h in 0..heads {
            let p = &probs[bi * heads + h];
            let q = gather_head(qkv, width, block, h * dh, dh);
            let k = gather_head(qkv, width, block, width + h * dh, dh);
            let v = gather_head(qkv, width, block, 2 * width + h * dh, dh);
            let mut d_o = Vec::with_capacity(len * dh);
            for r in block.start..block.start + len {
                d_o.extend_from_slice(&grad_out[r * width + h * dh..r * width + (h + 1) * dh]);
            }
            let mut d_v = vec![T::zero(); len * dh];
            T::gemm(len, len, dh, p, true, &d_o, false, &mut d_v, false);
            let mut d_s = vec![T::zero(); len * len];
            T::gemm(len, dh, len, &d_o, false, &v, true, &mut d_s, false);
            for i in 0..len {
                let hi = block.mask.visible(i, len);
                let prow = &p[i * len..(i + 1) * len];
                let row = &mut d_s[i * len..(i + 1) * len];
                let dot: T = (0..hi).map(|j| prow[j] * row[j]).sum();
                for j in 0..hi {
                    row[j] = prow[j] * (row[j] - dot) * scale;
                }
                row[hi..].iter_mut().for_each(|s| *s = T::zero());
            }
            let mut d_q = vec![T::zero(); len * dh];
            T::gemm(len, len, dh, &d_s, false, &k, false, &mut d_q, false);
            let mut d_k = vec![T::zero(); len * dh];
            T::gemm(len, len, dh, &d_s, true, &q, false, &mut d_k, false);
            for i in 0..len {
                let r = block.start + i;
                let base = r * stride + h * dh;
                for c in 0..dh {
                    grad[base + c] = grad[base + c] + d_q[i * dh + c];
                    grad[base + width + c] = grad[base + width + c] + d_k[i * dh + c];
                    grad[base + 2 * width + c] = grad[base + 2 * width + c] + d_v[i * dh + c];
                }
            }
        }
    }
    grad
}
