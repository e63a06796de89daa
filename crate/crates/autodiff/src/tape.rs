use std::fmt;
use std::sync::Arc;

use crate::attention::{self, AttentionLayout};
use crate::error::{AutodiffError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-supplied elementwise op: `(input, output, upstream) -> input grad`.
pub type CustomBackward<T> =
    Arc<dyn Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T> + Send + Sync>;

/// Values clamped into `[BCE_EPS, 1 - BCE_EPS]` before the log in [`Tape::binary_cross_entropy`].
pub const BCE_EPS: f64 = 1e-7;

pub(crate) enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Exp(Var),
    Gelu(Var),
    Sigmoid(Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    L2Normalize {
        input: Var,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    BinaryCrossEntropy {
        probs: Var,
        labels: Vec<T>,
    },
    Attention {
        qkv: Var,
        layout: Arc<AttentionLayout>,
        probs: Vec<Vec<T>>,
    },
    Custom {
        input: Var,
        backward: CustomBackward<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Exp(..) => "exp",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Gather { .. } => "gather",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BinaryCrossEntropy { .. } => "binary_cross_entropy",
            Op::Attention { .. } => "attention",
            Op::Custom { .. } => "custom",
        }
    }
}

/// One recorded value together with the op that produced it.
pub struct TapeNode<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

impl<T: Scalar> TapeNode<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn op_name(&self) -> &'static str {
        self.op.name()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

impl<T: Scalar> fmt::Debug for TapeNode<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TapeNode")
            .field("op", &self.op.name())
            .field("shape", &self.value.shape())
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

/// Append-only record of a forward computation.
///
/// Nodes are only ever pushed after their inputs, so the tape order is a
/// topological order and backward is a single reverse sweep.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<TapeNode<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let one = T::one();
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let value = half * x * (one + t);
    let du = c * (one + three * a * x * x);
    let deriv = half * (one + t) + half * x * (one - t * t) * du;
    (value, deriv)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, var: Var) -> &TapeNode<T> {
        &self.nodes[var.0]
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Index and op name of the earliest node holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(|i| (i, self.nodes[i].op.name()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(TapeNode {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input value. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        match *self.shape(a) {
            [r, c] => Ok((r, c)),
            _ => Err(AutodiffError::InvalidArgument {
                op,
                reason: format!("expected a matrix, got shape {:?}", self.shape(a)),
            }),
        }
    }

    /// Matrix product of `m×k` and `k×n` operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Ok(Tensor::from_parts(x.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |p, q| p + q)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |p, q| p - q)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |p, q| p * q)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `..×n` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(row).numel() != cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data().to_vec();
        let x = self.value(a);
        let data = x
            .data()
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(&r).map(|(&p, &q)| p + q))
            .collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::from_f64_lossy(factor);
        let out = self.value(a).map(|x| x * f);
        let rg = self.requires_grad(a);
        self.push(out, Op::Scale(a, f), rg)
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: self.shape(s).to_vec(),
            });
        }
        let f = self.value(s).item();
        let out = self.value(a).map(|x| x * f);
        let rg = self.any_grad(&[a, s]);
        Ok(self.push(out, Op::ScaleBy(a, s), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::exp);
        let rg = self.requires_grad(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu_parts(x).0);
        let rg = self.requires_grad(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let rg = self.requires_grad(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", a)?;
        let x = self.value(a).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x[i * c + j];
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| AutodiffError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::InvalidAxis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::InvalidAxis {
                op: "slice",
                axis,
                shape,
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                bound: shape[axis],
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Slice {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Row range of a matrix (or of the leading axis in general).
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.slice(a, 0, start, len)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = T::from_f64_lossy(x.numel() as f64);
        let s: T = x.data().iter().copied().sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s / n), Op::Mean(a), rg)
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("gather", table)?;
        if ids.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "gather",
                reason: "no indices".into(),
            });
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(&t[id * cols..(id + 1) * cols]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), cols], data),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::InvalidAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| x[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..n {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total = total + e;
                }
                for j in 0..n {
                    out[idx(j)] = out[idx(j)] / total;
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { input: a, axis }, rg))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        for p in [gain, bias] {
            if self.value(p).numel() != d {
                return Err(AutodiffError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(AutodiffError::InvalidArgument {
                op: "layer_norm",
                reason: format!("eps must be positive, got {eps}"),
            });
        }
        let eps = T::from_f64_lossy(eps);
        let rows = self.value(x).rows();
        let dn = T::from_f64_lossy(d as f64);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let xs = self.value(x).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = x.cols();
        let tiny = T::from_f64_lossy(1e-12);
        let mut norms = Vec::with_capacity(x.rows());
        let mut data = Vec::with_capacity(x.numel());
        for row in x.data().chunks(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(tiny);
            norms.push(n);
            data.extend(row.iter().map(|&v| v / n));
        }
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.requires_grad(a);
        self.push(out, Op::L2Normalize { input: a, norms }, rg)
    }

    /// Mean over rows of `logsumexp(logits[i]) - logits[i][targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![rows, cols],
                rhs: vec![targets.len()],
            });
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: cols,
                });
            }
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * cols + j] = e;
                z = z + e;
            }
            for p in probs[r * cols..(r + 1) * cols].iter_mut() {
                *p = *p / z;
            }
            total = total + (max + z.ln() - row[t]);
        }
        let loss = total / T::from_f64_lossy(rows as f64);
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean of `-[y ln p + (1-y) ln(1-p)]`, with `p` clamped to
    /// `[BCE_EPS, 1 - BCE_EPS]`. The clamp is straight-through for gradients.
    pub fn binary_cross_entropy(&mut self, probs: Var, labels: &[f64]) -> Result<Var> {
        let p = self.value(probs);
        if p.numel() != labels.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "binary_cross_entropy",
                lhs: p.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let lo = T::from_f64_lossy(BCE_EPS);
        let hi = T::one() - lo;
        let labels: Vec<T> = labels.iter().map(|&y| T::from_f64_lossy(y)).collect();
        let total: T = p
            .data()
            .iter()
            .zip(&labels)
            .map(|(&pv, &y)| {
                let pv = pv.max(lo).min(hi);
                -(y * pv.ln() + (T::one() - y) * (T::one() - pv).ln())
            })
            .sum();
        let loss = total / T::from_f64_lossy(labels.len() as f64);
        let rg = self.requires_grad(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BinaryCrossEntropy { probs, labels },
            rg,
        ))
    }

    /// Multi-head attention over packed `T × 3d` query/key/value rows.
    pub fn attention(&mut self, qkv: Var, layout: Arc<AttentionLayout>) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("attention", qkv)?;
        if cols % 3 != 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "attention",
                reason: format!("qkv width {cols} is not a multiple of 3"),
            });
        }
        let width = cols / 3;
        layout.validate(rows, width)?;
        let fwd = attention::forward(self.value(qkv).data(), rows, width, &layout);
        let rg = self.requires_grad(qkv);
        Ok(self.push(
            Tensor::from_parts(vec![rows, width], fwd.output),
            Op::Attention {
                qkv,
                layout,
                probs: fwd.probs,
            },
            rg,
        ))
    }

    /// Records an arbitrary shape-preserving op given its forward result and backward rule.
    pub fn custom(
        &mut self,
        input: Var,
        forward: impl Fn(&Tensor<T>) -> Tensor<T>,
        backward: CustomBackward<T>,
    ) -> Result<Var> {
        let out = forward(self.value(input));
        if out.shape() != self.shape(input) {
            return Err(AutodiffError::ShapeMismatch {
                op: "custom",
                lhs: self.shape(input).to_vec(),
                rhs: out.shape().to_vec(),
            });
        }
        let rg = self.requires_grad(input);
        Ok(self.push(out, Op::Custom { input, backward }, rg))
    }

    /// Reverse sweep from `root`, seeded with `seed` (same shape as the root).
    ///
    /// Gradients from multiple consumers are summed in tape order.
    pub fn backward(&self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(root) {
            return Err(AutodiffError::SeedShape {
                seed: seed.shape().to_vec(),
                output: self.shape(root).to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (var, contribution) in self.backward_node(node, &g) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Backward from a one-element root with seed 1.
    pub fn backward_scalar(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: self.shape(root).to_vec(),
            });
        }
        self.backward(root, Tensor::full(self.shape(root), T::one()))
    }

    fn backward_node(&self, node: &TapeNode<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let like = |v: Var, data: Vec<T>| Tensor::from_parts(val(v).shape().to_vec(), data);
        let gd = g.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                let mut out = Vec::new();
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gd, false, val(*b).data(), true, &mut da, false);
                    out.push((*a, like(*a, da)));
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, val(*a).data(), true, gd, false, &mut db, false);
                    out.push((*b, like(*b, db)));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let da = gd.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                let db = gd.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                vec![(*a, like(*a, da)), (*b, like(*b, db))]
            }
            Op::AddRow(a, row) => {
                let cols = val(*row).numel();
                let mut dr = vec![T::zero(); cols];
                for chunk in gd.chunks(cols) {
                    for (acc, &x) in dr.iter_mut().zip(chunk) {
                        *acc = *acc + x;
                    }
                }
                vec![(*a, g.clone()), (*row, like(*row, dr))]
            }
            Op::Scale(a, f) => vec![(*a, g.map(|x| x * *f))],
            Op::ScaleBy(a, s) => {
                let f = val(*s).item();
                let ds: T = gd.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).sum();
                vec![(*a, g.map(|x| x * f)), (*s, like(*s, vec![ds]))]
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(node.value.data()).map(|(&x, &y)| x * y).collect();
                vec![(*a, like(*a, d))]
            }
            Op::Gelu(a) => {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&x, &v)| x * gelu_parts(v).1)
                    .collect();
                vec![(*a, like(*a, d))]
            }
            Op::Sigmoid(a) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&x, &s)| x * s * (T::one() - s))
                    .collect();
                vec![(*a, like(*a, d))]
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = gd[j * r + i];
                    }
                }
                vec![(*a, like(*a, d))]
            }
            Op::Reshape(a) => vec![(*a, like(*a, gd.to_vec()))],
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut parts: Vec<Vec<T>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(val(*v).numel()))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (p, v) in parts.iter_mut().zip(inputs) {
                        let len = val(*v).shape()[*axis] * inner;
                        p.extend_from_slice(&gd[offset..offset + len]);
                        offset += len;
                    }
                }
                inputs
                    .iter()
                    .zip(parts)
                    .map(|(v, p)| (*v, like(*v, p)))
                    .collect()
            }
            Op::Slice { input, axis, start } => {
                let (outer, n, inner) = split_axis(val(*input).shape(), *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![T::zero(); val(*input).numel()];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                vec![(*input, like(*input, d))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), gd[0]))],
            Op::Mean(a) => {
                let n = T::from_f64_lossy(val(*a).numel() as f64);
                vec![(*a, Tensor::full(val(*a).shape(), gd[0] / n))]
            }
            Op::Gather { table, ids } => {
                let cols = val(*table).cols();
                let mut d = vec![T::zero(); val(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..cols {
                        d[id * cols + j] = d[id * cols + j] + gd[r * cols + j];
                    }
                }
                vec![(*table, like(*table, d))]
            }
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let y = node.value.data();
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| o * n * inner + j * inner + i;
                        let dot: T = (0..n).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            d[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                vec![(*input, like(*input, d))]
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = val(*gain).numel();
                let gain_v = val(*gain).data();
                let dn = T::from_f64_lossy(d as f64);
                let mut dx = vec![T::zero(); xhat.len()];
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        let dh = gr[j] * gain_v[j];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * hr[j];
                        dg[j] = dg[j] + gr[j] * hr[j];
                        db[j] = db[j] + gr[j];
                    }
                    mean_dh = mean_dh / dn;
                    mean_dh_h = mean_dh_h / dn;
                    for j in 0..d {
                        let dh = gr[j] * gain_v[j];
                        dx[r * d + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                vec![
                    (*input, like(*input, dx)),
                    (*gain, like(*gain, dg)),
                    (*bias, like(*bias, db)),
                ]
            }
            Op::L2Normalize { input, norms } => {
                let y = node.value.data();
                let d = node.value.cols();
                let mut dx = vec![T::zero(); y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                vec![(*input, like(*input, dx))]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let cols = val(*logits).cols();
                let scale = gd[0] / T::from_f64_lossy(targets.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * cols + t] = d[r * cols + t] - scale;
                }
                vec![(*logits, like(*logits, d))]
            }
            Op::BinaryCrossEntropy { probs, labels } => {
                let lo = T::from_f64_lossy(BCE_EPS);
                let hi = T::one() - lo;
                let scale = gd[0] / T::from_f64_lossy(labels.len() as f64);
                let d = val(*probs)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        let p = p.max(lo).min(hi);
                        scale * (-(y / p) + (T::one() - y) / (T::one() - p))
                    })
                    .collect();
                vec![(*probs, like(*probs, d))]
            }
            Op::Attention { qkv, layout, probs } => {
                let width = node.value.cols();
                let d = attention::backward(val(*qkv).data(), gd, width, layout, probs);
                vec![(*qkv, like(*qkv, d))]
            }
            Op::Custom { input, backward } => {
                vec![(*input, backward(val(*input), &node.value, g))]
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`; zeros when nothing flowed into it.
    pub fn get(&self, var: Var) -> Tensor<T> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, var: Var) -> Tensor<T> {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    pub fn touched(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}
