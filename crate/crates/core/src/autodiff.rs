//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only list of nodes. Every input of node `n` has an
//! id below `n`, so the backward pass is a single sweep in reverse append order.

use std::collections::BTreeMap;

use crate::tensor::{dot, is_excluded, matmul_into, Result, Tensor, TensorError, NEG_SENTINEL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Packed-sequence layout for [`Graph::attention`]: each segment is an
/// independent sequence occupying rows `start..start + len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Gelu(Var),
    Softplus(Var),
    Sqrt(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    MaskFill {
        x: Var,
        keep: Vec<bool>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ReplaceRows {
        base: Var,
        idx: Vec<usize>,
        src: Var,
    },
    ScatterAddRows {
        base: Var,
        idx: Vec<usize>,
        src: Var,
    },
    MulRows {
        x: Var,
        w: Var,
    },
    Column {
        x: Var,
        col: usize,
    },
    GroupMean {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        // Per segment, per head, row-major len×len attention probabilities.
        probs: Vec<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(&v.0).map(|g| g.as_slice())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.remove(&v.0)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds vector `b[n]` to every row of `x[..., n]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tx.last_dim();
        if tb.len() != n {
            return Err(mismatch("add_row", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            add_into(row, tb.data());
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, Op::AddRow(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * c).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.data().iter().sum::<f64>() / tx.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// Elementwise square root. The derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0).sqrt(), Op::Sqrt(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Layer normalization over the last axis, population variance, eps 1e-5.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.last_dim();
        if tg.len() != n {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.len() != n {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let rows = tx.leading();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let shape0 = self.value(*first).shape().to_vec();
        if axis >= shape0.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank: shape0.len(),
            });
        }
        let outer: usize = shape0[..axis].iter().product();
        let inner: usize = shape0[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(inputs.len());
        let mut total_axis = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != shape0.len()
                || s[..axis] != shape0[..axis]
                || s[axis + 1..] != shape0[axis + 1..]
            {
                return Err(mismatch("concat", self.value(*first), self.value(v)));
            }
            widths.push(s[axis] * inner);
            total_axis += s[axis];
        }
        let row_width: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row_width);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = shape0;
        shape[axis] = total_axis;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
            rg,
        ))
    }

    /// Rows of `table[V×d]` selected by `ids`, giving `[len×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(TensorError::Invalid("embedding table must be rank 2".into()));
        }
        if ids.is_empty() {
            return Err(TensorError::Invalid("embedding lookup with no ids".into()));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    extent: v,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax along `axis` with max subtraction. Entries at or below half the
    /// negative sentinel are excluded and map to exactly zero.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    let v = src[at(j)];
                    if !is_excluded(v) && v > mx {
                        mx = v;
                    }
                }
                if mx == f64::NEG_INFINITY {
                    continue;
                }
                let mut z = 0.0;
                for j in 0..n {
                    let v = src[at(j)];
                    if !is_excluded(v) {
                        let e = (v - mx).exp();
                        out[at(j)] = e;
                        z += e;
                    }
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, outer, n, inner }, rg))
    }

    /// Replaces entries where `keep` is false with the negative sentinel.
    pub fn mask_fill(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        if keep.len() != tx.len() {
            return Err(TensorError::InvalidShape {
                shape: tx.shape().to_vec(),
                len: keep.len(),
            });
        }
        let data = tx
            .data()
            .iter()
            .zip(keep)
            .map(|(&v, &k)| if k { v } else { NEG_SENTINEL })
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::MaskFill {
                x,
                keep: keep.to_vec(),
            },
            rg,
        ))
    }

    fn check_rows(&self, op: &'static str, x: Var, idx: &[usize]) -> Result<(usize, usize)> {
        let tx = self.value(x);
        let (m, n) = (tx.leading(), tx.last_dim());
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(TensorError::IndexOutOfRange {
                op,
                index: bad,
                extent: m,
            });
        }
        Ok((m, n))
    }

    /// Selected rows of `x[m×n]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (_, n) = self.check_rows("gather_rows", x, idx)?;
        if idx.is_empty() {
            return Err(TensorError::Invalid("gather_rows with no indices".into()));
        }
        let tx = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(tx.row(i));
        }
        let t = Tensor::new(vec![idx.len(), n], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    fn rows_src_check(&self, op: &'static str, base: Var, idx: &[usize], src: Var) -> Result<usize> {
        let (_, n) = self.check_rows(op, base, idx)?;
        let ts = self.value(src);
        if ts.last_dim() != n || ts.leading() != idx.len() {
            return Err(mismatch(op, self.value(base), ts));
        }
        Ok(n)
    }

    /// Copy of `base` with row `idx[r]` overwritten by row `r` of `src`.
    pub fn replace_rows(&mut self, base: Var, idx: &[usize], src: Var) -> Result<Var> {
        let n = self.rows_src_check("replace_rows", base, idx, src)?;
        let mut seen = std::collections::HashSet::new();
        if !idx.iter().all(|i| seen.insert(*i)) {
            return Err(TensorError::Invalid("replace_rows indices must be distinct".into()));
        }
        let mut data = self.value(base).data().to_vec();
        let ts = self.value(src);
        for (r, &i) in idx.iter().enumerate() {
            data[i * n..(i + 1) * n].copy_from_slice(ts.row(r));
        }
        let t = Tensor::new(self.value(base).shape().to_vec(), data)?;
        let rg = self.rg(&[base, src]);
        Ok(self.push(
            t,
            Op::ReplaceRows {
                base,
                idx: idx.to_vec(),
                src,
            },
            rg,
        ))
    }

    /// Copy of `base` with row `r` of `src` added into row `idx[r]`.
    pub fn scatter_add_rows(&mut self, base: Var, idx: &[usize], src: Var) -> Result<Var> {
        let n = self.rows_src_check("scatter_add_rows", base, idx, src)?;
        let mut data = self.value(base).data().to_vec();
        let ts = self.value(src);
        for (r, &i) in idx.iter().enumerate() {
            add_into(&mut data[i * n..(i + 1) * n], ts.row(r));
        }
        let t = Tensor::new(self.value(base).shape().to_vec(), data)?;
        let rg = self.rg(&[base, src]);
        Ok(self.push(
            t,
            Op::ScatterAddRows {
                base,
                idx: idx.to_vec(),
                src,
            },
            rg,
        ))
    }

    /// Scales row `i` of `x[m×n]` by `w[i]` (`w` holds `m` values).
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let n = tx.last_dim();
        if tw.len() != tx.leading() {
            return Err(mismatch("mul_rows", tx, tw));
        }
        let mut data = tx.data().to_vec();
        for (row, &s) in data.chunks_mut(n).zip(tw.data()) {
            for v in row {
                *v *= s;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(t, Op::MulRows { x, w }, rg))
    }

    /// Column `col` of `x[m×n]` as a length-`m` vector.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.last_dim();
        if col >= n {
            return Err(TensorError::IndexOutOfRange {
                op: "column",
                index: col,
                extent: n,
            });
        }
        let data = tx.data().chunks(n).map(|r| r[col]).collect();
        let t = Tensor::new(vec![tx.leading()], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Column { x, col }, rg))
    }

    /// Row `g` of the result is the mean of the rows of `x` listed in `groups[g]`.
    pub fn group_mean(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
            return Err(TensorError::Invalid("group_mean needs non-empty groups".into()));
        }
        let all: Vec<usize> = groups.iter().flatten().copied().collect();
        let (_, n) = self.check_rows("group_mean", x, &all)?;
        let tx = self.value(x);
        let mut out = vec![0.0; groups.len() * n];
        for (g, rows) in groups.iter().enumerate() {
            let dst = &mut out[g * n..(g + 1) * n];
            for &r in rows {
                add_into(dst, tx.row(r));
            }
            let inv = 1.0 / rows.len() as f64;
            for v in dst {
                *v *= inv;
            }
        }
        let t = Tensor::new(vec![groups.len(), n], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::GroupMean {
                x,
                groups: groups.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[T×d]`; each segment attends only within itself.
    /// Keys with `key_valid[j] == false` are excluded; with `causal`, query `i`
    /// sees keys `j <= i` of its segment. A query with no visible key outputs zero.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        causal: bool,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() {
            return Err(mismatch("attention", tq, tk));
        }
        if tq.shape() != tv.shape() {
            return Err(mismatch("attention", tq, tv));
        }
        if tq.rank() != 2 {
            return Err(TensorError::Invalid("attention expects rank-2 inputs".into()));
        }
        let (t_len, d) = (tq.shape()[0], tq.shape()[1]);
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        if let Some(kv) = key_valid {
            if kv.len() != t_len {
                return Err(TensorError::Invalid("key mask length mismatch".into()));
            }
        }
        for s in segments {
            if s.len == 0 || s.start + s.len > t_len {
                return Err(TensorError::Invalid(format!(
                    "segment {}..{} outside {} rows",
                    s.start,
                    s.start + s.len,
                    t_len
                )));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![0.0; t_len * d];
        let mut probs = Vec::with_capacity(segments.len());
        let mut qh = Vec::new();
        let mut kt = Vec::new();
        let mut vh = Vec::new();
        let mut oh = Vec::new();
        for seg in segments {
            let l = seg.len;
            let mut p_seg = vec![0.0; heads * l * l];
            let visible = |i: usize, j: usize| {
                (!causal || j <= i) && key_valid.is_none_or(|kv| kv[seg.start + j])
            };
            for h in 0..heads {
                gather_head(qd, seg.start, l, d, h * dh, dh, &mut qh);
                gather_head(vd, seg.start, l, d, h * dh, dh, &mut vh);
                gather_head_t(kd, seg.start, l, d, h * dh, dh, &mut kt);
                let p = &mut p_seg[h * l * l..(h + 1) * l * l];
                matmul_into(&qh, &kt, p, l, dh, l);
                for i in 0..l {
                    let prow = &mut p[i * l..(i + 1) * l];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, x) in prow.iter_mut().enumerate() {
                        if visible(i, j) {
                            *x *= scale;
                            mx = mx.max(*x);
                        }
                    }
                    if mx == f64::NEG_INFINITY {
                        prow.iter_mut().for_each(|x| *x = 0.0);
                        continue;
                    }
                    let mut z = 0.0;
                    for (j, x) in prow.iter_mut().enumerate() {
                        if visible(i, j) {
                            *x = (*x - mx).exp();
                            z += *x;
                        } else {
                            *x = 0.0;
                        }
                    }
                    let inv = 1.0 / z;
                    prow.iter_mut().for_each(|x| *x *= inv);
                }
                oh.clear();
                oh.resize(l * dh, 0.0);
                matmul_into(p, &vh, &mut oh, l, l, dh);
                for i in 0..l {
                    let r = (seg.start + i) * d + h * dh;
                    out[r..r + dh].copy_from_slice(&oh[i * dh..(i + 1) * dh]);
                }
            }
            probs.push(p_seg);
        }
        let t = Tensor::new(vec![t_len, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Attention probabilities saved by an attention node: per segment, per
    /// head, a row-major `len×len` matrix.
    pub fn attention_probs(&self, v: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`; returns gradients of all leaves
    /// marked `requires_grad`. Interior gradients are dropped once propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        let mut out = Gradients::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.grads.insert(id, g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(out)
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Accumulate a contribution into the gradient slot of `v`.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
            }};
        }
        let node = &nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    let mut bt = Vec::new();
                    transpose_into(tb.data(), k, n, &mut bt);
                    matmul_into(g, &bt, slot!(*a), m, n, k);
                }
                if wants(*b) {
                    let mut at = Vec::new();
                    transpose_into(ta.data(), m, k, &mut at);
                    matmul_into(&at, g, slot!(*b), k, m, n);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    add_into(slot!(*a), g);
                }
                if wants(*b) {
                    add_into(slot!(*b), g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(slot!(*a), g);
                }
                if wants(*b) {
                    for (d, gv) in slot!(*b).iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    for ((d, gv), bv) in slot!(*a).iter_mut().zip(g).zip(tb.data()) {
                        *d += gv * bv;
                    }
                }
                if wants(*b) {
                    for ((d, gv), av) in slot!(*b).iter_mut().zip(g).zip(ta.data()) {
                        *d += gv * av;
                    }
                }
            }
            Op::AddRow(x, b) => {
                if wants(*x) {
                    add_into(slot!(*x), g);
                }
                if wants(*b) {
                    let n = nodes[b.0].value.len();
                    let gb = slot!(*b);
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                for (d, gv) in slot!(*x).iter_mut().zip(g) {
                    *d += gv * c;
                }
            }
            Op::Sum(x) => {
                let g0 = g[0];
                for d in slot!(*x).iter_mut() {
                    *d += g0;
                }
            }
            Op::Mean(x) => {
                let g0 = g[0] / nodes[x.0].value.len() as f64;
                for d in slot!(*x).iter_mut() {
                    *d += g0;
                }
            }
            Op::Relu(x) => {
                let tx = &nodes[x.0].value;
                for ((d, gv), xv) in slot!(*x).iter_mut().zip(g).zip(tx.data()) {
                    if *xv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Gelu(x) => {
                let tx = &nodes[x.0].value;
                for ((d, gv), &xv) in slot!(*x).iter_mut().zip(g).zip(tx.data()) {
                    *d += gv * gelu_grad(xv);
                }
            }
            Op::Softplus(x) => {
                let tx = &nodes[x.0].value;
                for ((d, gv), &xv) in slot!(*x).iter_mut().zip(g).zip(tx.data()) {
                    *d += gv * sigmoid(xv);
                }
            }
            Op::Sqrt(x) => {
                let out = node.value.data();
                for ((d, gv), &y) in slot!(*x).iter_mut().zip(g).zip(out) {
                    if y > 0.0 {
                        *d += gv * 0.5 / y;
                    }
                }
            }
            Op::Reshape(x) => add_into(slot!(*x), g),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let tg = &nodes[gamma.0].value;
                let n = tg.len();
                if wants(*gamma) {
                    let gg = slot!(*gamma);
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = slot!(*beta);
                    for grow in g.chunks(n) {
                        add_into(gb, grow);
                    }
                }
                if wants(*x) {
                    let gx = slot!(*x);
                    let mut dh = vec![0.0; n];
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            dh[j] = grow[j] * tg.data()[j];
                            m1 += dh[j];
                            m2 += dh[j] * hrow[j];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        let is = inv_std[r];
                        for j in 0..n {
                            gx[r * n + j] += is * (dh[j] - m1 - hrow[j] * m2);
                        }
                    }
                }
            }
            Op::Concat {
                inputs,
                outer,
                widths,
            } => {
                let row_width: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    if wants(v) {
                        let gv = slot!(v);
                        for o in 0..*outer {
                            add_into(
                                &mut gv[o * w..(o + 1) * w],
                                &g[o * row_width + offset..o * row_width + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.last_dim();
                let gt = slot!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = node.value.data();
                let gx = slot!(*x);
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let s: f64 = (0..*n).map(|j| y[at(j)] * g[at(j)]).sum();
                        for j in 0..*n {
                            gx[at(j)] += y[at(j)] * (g[at(j)] - s);
                        }
                    }
                }
            }
            Op::MaskFill { x, keep } => {
                for ((d, gv), k) in slot!(*x).iter_mut().zip(g).zip(keep) {
                    if *k {
                        *d += gv;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let n = node.value.last_dim();
                let gx = slot!(*x);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut gx[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                }
            }
            Op::ReplaceRows { base, idx, src } => {
                let n = node.value.last_dim();
                if wants(*base) {
                    // Overwritten rows carry no gradient back to `base`.
                    let mut pass = g.to_vec();
                    for &i in idx {
                        pass[i * n..(i + 1) * n].iter_mut().for_each(|x| *x = 0.0);
                    }
                    add_into(slot!(*base), &pass);
                }
                if wants(*src) {
                    let gs = slot!(*src);
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gs[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::ScatterAddRows { base, idx, src } => {
                let n = node.value.last_dim();
                if wants(*base) {
                    add_into(slot!(*base), g);
                }
                if wants(*src) {
                    let gs = slot!(*src);
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gs[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::MulRows { x, w } => {
                let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
                let n = tx.last_dim();
                if wants(*x) {
                    let gx = slot!(*x);
                    for (r, &s) in tw.data().iter().enumerate() {
                        for j in 0..n {
                            gx[r * n + j] += g[r * n + j] * s;
                        }
                    }
                }
                if wants(*w) {
                    let gw = slot!(*w);
                    for (r, d) in gw.iter_mut().enumerate() {
                        *d += dot(&g[r * n..(r + 1) * n], tx.row(r));
                    }
                }
            }
            Op::Column { x, col } => {
                let n = nodes[x.0].value.last_dim();
                let gx = slot!(*x);
                for (r, gv) in g.iter().enumerate() {
                    gx[r * n + col] += gv;
                }
            }
            Op::GroupMean { x, groups } => {
                let n = node.value.last_dim();
                let gx = slot!(*x);
                for (gi, rows) in groups.iter().enumerate() {
                    let inv = 1.0 / rows.len() as f64;
                    let grow = &g[gi * n..(gi + 1) * n];
                    for &r in rows {
                        for j in 0..n {
                            gx[r * n + j] += grow[j] * inv;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let d = tq.shape()[1];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let t_len = tq.shape()[0];
                let mut gq = vec![0.0; t_len * d];
                let mut gk = vec![0.0; t_len * d];
                let mut gvv = vec![0.0; t_len * d];
                let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
                let (mut qh, mut kh, mut vt, mut gh) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
                let (mut ds, mut pt, mut buf) = (Vec::new(), Vec::new(), Vec::new());
                for (seg, p_seg) in segments.iter().zip(probs) {
                    let l = seg.len;
                    for h in 0..*heads {
                        let off = h * dh;
                        let p = &p_seg[h * l * l..(h + 1) * l * l];
                        gather_head(qd, seg.start, l, d, off, dh, &mut qh);
                        gather_head(kd, seg.start, l, d, off, dh, &mut kh);
                        gather_head_t(vd, seg.start, l, d, off, dh, &mut vt);
                        gather_head(g, seg.start, l, d, off, dh, &mut gh);
                        // dP = G·Vᵀ, then dS = P ⊙ (dP − rowsum(P ⊙ dP)) · scale
                        ds.clear();
                        ds.resize(l * l, 0.0);
                        matmul_into(&gh, &vt, &mut ds, l, dh, l);
                        for i in 0..l {
                            let prow = &p[i * l..(i + 1) * l];
                            let drow = &mut ds[i * l..(i + 1) * l];
                            let s: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                            for (dv, &pv) in drow.iter_mut().zip(prow) {
                                *dv = pv * (*dv - s) * scale;
                            }
                        }
                        // dV = Pᵀ·G
                        transpose_into(p, l, l, &mut pt);
                        buf.clear();
                        buf.resize(l * dh, 0.0);
                        matmul_into(&pt, &gh, &mut buf, l, l, dh);
                        scatter_head(&buf, seg.start, l, d, off, dh, &mut gvv);
                        // dQ = dS·K
                        buf.clear();
                        buf.resize(l * dh, 0.0);
                        matmul_into(&ds, &kh, &mut buf, l, l, dh);
                        scatter_head(&buf, seg.start, l, d, off, dh, &mut gq);
                        // dK = dSᵀ·Q
                        transpose_into(&ds, l, l, &mut pt);
                        buf.clear();
                        buf.resize(l * dh, 0.0);
                        matmul_into(&pt, &qh, &mut buf, l, l, dh);
                        scatter_head(&buf, seg.start, l, d, off, dh, &mut gk);
                    }
                }
                if wants(*q) {
                    add_into(slot!(*q), &gq);
                }
                if wants(*k) {
                    add_into(slot!(*k), &gk);
                }
                if wants(*v) {
                    add_into(slot!(*v), &gvv);
                }
            }
        }
    }
}

/// Rows `start..start+l`, columns `off..off+w` of a row-major `[·×d]` buffer.
fn gather_head(src: &[f64], start: usize, l: usize, d: usize, off: usize, w: usize, out: &mut Vec<f64>) {
    out.clear();
    for i in 0..l {
        let r = (start + i) * d + off;
        out.extend_from_slice(&src[r..r + w]);
    }
}

/// As [`gather_head`] but transposed to `[w×l]`.
fn gather_head_t(src: &[f64], start: usize, l: usize, d: usize, off: usize, w: usize, out: &mut Vec<f64>) {
    out.clear();
    out.resize(w * l, 0.0);
    for i in 0..l {
        let r = (start + i) * d + off;
        for c in 0..w {
            out[c * l + i] = src[r + c];
        }
    }
}

fn scatter_head(src: &[f64], start: usize, l: usize, d: usize, off: usize, w: usize, dst: &mut [f64]) {
    for i in 0..l {
        let r = (start + i) * d + off;
        for (a, b) in dst[r..r + w].iter_mut().zip(&src[i * w..(i + 1) * w]) {
            *a += b;
        }
    }
}

fn transpose_into(src: &[f64], rows: usize, cols: usize, out: &mut Vec<f64>) {
    out.clear();
    out.resize(rows * cols, 0.0);
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
}
