//! Wengert-list reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the tape. Node
//! indices are a topological order, so `backward` walks them in reverse and
//! each node's adjoint is complete before its rule fires.

use std::sync::Arc;

use super::params::ParamId;
use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use super::{KernelError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Variable-length groups of row indices, used for per-item attention over
/// flattened reason tables. Segments may share rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Segments {
    rows: Vec<usize>,
    offsets: Vec<usize>,
}

impl Segments {
    pub fn new(lists: &[Vec<usize>]) -> Result<Self> {
        let mut rows = Vec::new();
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        for l in lists {
            if l.is_empty() {
                return Err(KernelError::EmptyKeys);
            }
            rows.extend_from_slice(l);
            offsets.push(rows.len());
        }
        Ok(Self { rows, offsets })
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Total number of entries across all segments.
    pub fn entries(&self) -> usize {
        self.rows.len()
    }

    pub fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    fn max_row(&self) -> Option<usize> {
        self.rows.iter().copied().max()
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Exp(Var),
    Expm1MinusId(Var),
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    CausalSoftmax(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Arc<Vec<usize>> },
    Sum(Var),
    Reshape(Var),
    OuterAdd(Var, Var),
    SegmentSoftmax { x: Var, segs: Arc<Segments> },
    SegmentWeightedSum { w: Var, e: Var, segs: Arc<Segments> },
    NllRows { x: Var, targets: Arc<Vec<usize>>, cols: Option<Arc<Vec<Vec<usize>>>>, correction: f64 },
    Clamp { x: Var, lo: f64, hi: f64 },
    Minimum(Var, Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> KernelError {
    KernelError::Shape { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`, about twice as fast as the libm call and
/// within a few ulps in absolute terms.
fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_slice(out: &mut [f64], stride: usize, n: usize) {
    let mut max = f64::NEG_INFINITY;
    for k in 0..n {
        max = max.max(out[k * stride]);
    }
    let mut sum = 0.0;
    for k in 0..n {
        let e = (out[k * stride] - max).exp();
        out[k * stride] = e;
        sum += e;
    }
    for k in 0..n {
        out[k * stride] /= sum;
    }
}

fn add_into(adj: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = adj[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad, None)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (its gradient is reported by [`Tape::grad`]).
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_arc(value, Op::Leaf, false, None)
    }

    /// Leaf bound to a stored parameter; `trainable = false` records it as a constant.
    pub fn param(&mut self, id: ParamId, value: Arc<Tensor>, trainable: bool) -> Var {
        self.push_arc(value, Op::Leaf, trainable, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    /// Accumulated gradients of every parameter leaf on this tape.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        self.nodes
            .iter()
            .zip(&self.leaf_grads)
            .filter_map(|(n, g)| match (n.param, g) {
                (Some(id), Some(g)) => Some((id, g.as_slice())),
                _ => None,
            })
            .collect()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
        if t.is_finite() {
            Ok(())
        } else {
            Err(KernelError::NonFinite { op })
        }
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 || ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n, k2) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(shape_err("matmul_bt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_into(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBT(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    // ----- elementwise ----------------------------------------------------

    fn binary_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same("minimum", a, b, |x, y| if x <= y { x } else { y })?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Minimum(a, b), rg))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tr.len() != n {
            return Err(shape_err("add_row", ta, tr));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            for (o, &r) in chunk.iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, op, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gelu(x), gelu)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// `exp(x) - x - 1`, evaluated as `expm1(x) - x` so it is never negative.
    pub fn expm1_minus_id(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Expm1MinusId(x), |v| v.exp_m1() - v)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    // ----- normalisations -------------------------------------------------

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.shape().len() || t.shape()[axis] == 0 {
            return Err(KernelError::Invalid { op: "softmax", detail: format!("axis {axis} of {:?}", t.shape()) });
        }
        Self::check_finite("softmax", t)?;
        let outer: usize = t.shape()[..axis].iter().product();
        let n = t.shape()[axis];
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let mut data = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                softmax_slice(&mut data[o * n * inner + i..], inner, n);
            }
        }
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, outer, n, inner }, rg))
    }

    /// Row softmax of an `L x L` score matrix where row `t` only sees columns `<= t`.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if r != c {
            return Err(shape_err("causal_softmax", t, t));
        }
        Self::check_finite("causal_softmax", t)?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &mut data[i * c..i * c + i + 1];
            row.copy_from_slice(&t.data()[i * c..i * c + i + 1]);
            softmax_slice(row, 1, i + 1);
        }
        let t = Tensor::new(vec![r, c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::CausalSoftmax(x), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        Self::check_finite("log_softmax", t)?;
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSoftmaxRows(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (t, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let (r, c) = (t.rows(), t.cols());
        if g.len() != c || b.len() != c {
            return Err(shape_err("layer_norm", t, g));
        }
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * g.data()[j] + b.data()[j];
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    // ----- structure ------------------------------------------------------

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if start + len > c {
            return Err(KernelError::Index { op: "slice_cols", index: start + len, size: c });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let t = Tensor::new(vec![r, len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if start + len > r {
            return Err(KernelError::Index { op: "slice_rows", index: start + len, size: r });
        }
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(vec![len, c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let r = self.value(xs[0]).rows();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = self.value(x);
            if t.rows() != r {
                return Err(shape_err("concat_cols", self.value(xs[0]), t));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![r, total], data)?;
        let rg = self.rg(xs);
        Ok(self.push(t, Op::ConcatCols(xs.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let c = self.value(xs[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let t = self.value(x);
            if t.cols() != c {
                return Err(shape_err("concat_rows", self.value(xs[0]), t));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let t = Tensor::new(vec![rows, c], data)?;
        let rg = self.rg(xs);
        Ok(self.push(t, Op::ConcatRows(xs.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= r {
                return Err(KernelError::Index { op: "gather_rows", index: i, size: r });
            }
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![idx.len(), c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::GatherRows { x, idx }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = (*self.nodes[x.0].value).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    /// `out[t * I + j, :] = a[t, :] + b[j, :]` for `a: T x k`, `b: I x k`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let k = ta.cols();
        if tb.cols() != k {
            return Err(shape_err("outer_add", ta, tb));
        }
        let (t_rows, i_rows) = (ta.rows(), tb.rows());
        let mut data = Vec::with_capacity(t_rows * i_rows * k);
        for t in 0..t_rows {
            let ar = &ta.data()[t * k..(t + 1) * k];
            for j in 0..i_rows {
                let br = &tb.data()[j * k..(j + 1) * k];
                data.extend(ar.iter().zip(br).map(|(x, y)| x + y));
            }
        }
        let t = Tensor::new(vec![t_rows * i_rows, k], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::OuterAdd(a, b), rg))
    }

    // ----- segmented attention pieces -------------------------------------

    /// Softmax of a score vector within each segment; output has one entry per
    /// segment entry (`1 x segs.entries()`).
    pub fn segment_softmax(&mut self, x: Var, segs: Arc<Segments>) -> Result<Var> {
        let t = self.value(x);
        if let Some(m) = segs.max_row() {
            if m >= t.len() {
                return Err(KernelError::Index { op: "segment_softmax", index: m, size: t.len() });
            }
        }
        Self::check_finite("segment_softmax", t)?;
        let mut out = vec![0.0; segs.entries()];
        for s in 0..segs.count() {
            let range = segs.range(s);
            for k in range.clone() {
                out[k] = t.data()[segs.rows[k]];
            }
            let n = range.len();
            softmax_slice(&mut out[range], 1, n);
        }
        let t = Tensor::new(vec![1, segs.entries()], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SegmentSoftmax { x, segs }, rg))
    }

    /// `out[s, :] = sum_{k in s} w[k] * e[rows[k], :]`.
    pub fn segment_weighted_sum(&mut self, w: Var, e: Var, segs: Arc<Segments>) -> Result<Var> {
        let (tw, te) = (self.value(w), self.value(e));
        if tw.len() != segs.entries() {
            return Err(shape_err("segment_weighted_sum", tw, te));
        }
        if let Some(m) = segs.max_row() {
            if m >= te.rows() {
                return Err(KernelError::Index { op: "segment_weighted_sum", index: m, size: te.rows() });
            }
        }
        let d = te.cols();
        let mut out = vec![0.0; segs.count() * d];
        for s in 0..segs.count() {
            let orow = &mut out[s * d..(s + 1) * d];
            for k in segs.range(s) {
                let wk = tw.data()[k];
                let er = &te.data()[segs.rows[k] * d..(segs.rows[k] + 1) * d];
                for (o, &v) in orow.iter_mut().zip(er) {
                    *o += wk * v;
                }
            }
        }
        let t = Tensor::new(vec![segs.count(), d], out)?;
        let rg = self.rg(&[w, e]);
        Ok(self.push(t, Op::SegmentWeightedSum { w, e, segs }, rg))
    }

    // ----- losses ---------------------------------------------------------

    /// Mean over rows of `-log softmax(x[r])[targets[r]]`.
    ///
    /// With `cols`, row `r` is normalised only over `targets[r]` and the listed
    /// negative columns, whose logits are shifted by `-correction`.
    pub fn nll_rows(
        &mut self,
        x: Var,
        targets: Arc<Vec<usize>>,
        cols: Option<Arc<Vec<Vec<usize>>>>,
        correction: f64,
    ) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if targets.len() != r {
            return Err(KernelError::Invalid {
                op: "nll",
                detail: format!("{} targets for {} rows", targets.len(), r),
            });
        }
        Self::check_finite("nll", t)?;
        let mut total = 0.0;
        for (i, &tg) in targets.iter().enumerate() {
            if tg >= c {
                return Err(KernelError::Index { op: "nll", index: tg, size: c });
            }
            let row = &t.data()[i * c..(i + 1) * c];
            let lse = match &cols {
                None => {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
                }
                Some(cols) => {
                    let logits = sampled_logits(row, tg, &cols[i], correction);
                    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
                }
            };
            total += lse - row[tg];
        }
        let t = Tensor::scalar(total / r.max(1) as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::NllRows { x, targets, cols, correction }, rg))
    }

    // ----- reverse pass ---------------------------------------------------

    /// Propagates adjoints from a scalar `loss` to every differentiable leaf.
    /// Leaf gradients accumulate across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(KernelError::NotScalar(lt.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[idx] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(idx, &g, &mut adj);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| -> &Tensor { &nodes[v.0].value };
        let need = |v: Var| nodes[v.0].requires_grad;
        let out = &*nodes[idx].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if need(*a) {
                    add_into(adj, *a, m * k, |s| matmul_bt_into(g, tb.data(), s, m, n, k));
                }
                if need(*b) {
                    add_into(adj, *b, k * n, |s| matmul_at_into(ta.data(), g, s, m, k, n));
                }
            }
            Op::MatMulBT(a, b) => {
                // c = a b^T: da = g b, db = g^T a
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if need(*a) {
                    add_into(adj, *a, m * k, |s| matmul_into(g, tb.data(), s, m, n, k));
                }
                if need(*b) {
                    add_into(adj, *b, n * k, |s| matmul_at_into(g, ta.data(), s, m, n, k));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                add_into(adj, *x, r * c, |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if need(v) {
                        add_into(adj, v, g.len(), |s| s.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                    }
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    add_into(adj, *a, g.len(), |s| s.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                }
                if need(*b) {
                    add_into(adj, *b, g.len(), |s| s.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if need(*a) {
                    add_into(adj, *a, g.len(), |s| {
                        for ((o, x), y) in s.iter_mut().zip(g).zip(tb.data()) {
                            *o += x * y;
                        }
                    });
                }
                if need(*b) {
                    add_into(adj, *b, g.len(), |s| {
                        for ((o, x), y) in s.iter_mut().zip(g).zip(ta.data()) {
                            *o += x * y;
                        }
                    });
                }
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let pick_a: Vec<bool> = ta.data().iter().zip(tb.data()).map(|(x, y)| x <= y).collect();
                if need(*a) {
                    add_into(adj, *a, g.len(), |s| {
                        for (k, o) in s.iter_mut().enumerate() {
                            if pick_a[k] {
                                *o += g[k];
                            }
                        }
                    });
                }
                if need(*b) {
                    add_into(adj, *b, g.len(), |s| {
                        for (k, o) in s.iter_mut().enumerate() {
                            if !pick_a[k] {
                                *o += g[k];
                            }
                        }
                    });
                }
            }
            Op::AddRow(a, row) => {
                if need(*a) {
                    add_into(adj, *a, g.len(), |s| s.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                }
                if need(*row) {
                    let n = val(*row).len();
                    add_into(adj, *row, n, |s| {
                        for chunk in g.chunks(n.max(1)) {
                            s.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                add_into(adj, *x, g.len(), |s| s.iter_mut().zip(g).for_each(|(o, v)| *o += v * c));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                add_into(adj, *x, g.len(), |s| s.iter_mut().zip(g).for_each(|(o, v)| *o += v));
            }
            Op::Gelu(x) => {
                let tx = val(*x);
                add_into(adj, *x, g.len(), |s| {
                    for ((o, v), &xi) in s.iter_mut().zip(g).zip(tx.data()) {
                        *o += v * gelu_grad(xi);
                    }
                });
            }
            Op::Exp(x) => {
                add_into(adj, *x, g.len(), |s| {
                    for ((o, v), &y) in s.iter_mut().zip(g).zip(out.data()) {
                        *o += v * y;
                    }
                });
            }
            Op::Expm1MinusId(x) => {
                let tx = val(*x);
                add_into(adj, *x, g.len(), |s| {
                    for ((o, v), &xi) in s.iter_mut().zip(g).zip(tx.data()) {
                        *o += v * xi.exp_m1();
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let tx = val(*x);
                add_into(adj, *x, g.len(), |s| {
                    for ((o, v), &xi) in s.iter_mut().zip(g).zip(tx.data()) {
                        if xi >= *lo && xi <= *hi {
                            *o += v;
                        }
                    }
                });
            }
            Op::Softmax { x, outer, n, inner } => {
                let (outer, n, inner) = (*outer, *n, *inner);
                let y = out.data();
                add_into(adj, *x, g.len(), |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let dot: f64 = (0..n).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                            for k in 0..n {
                                let p = base + k * inner;
                                s[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::CausalSoftmax(x) => {
                let c = out.cols();
                let y = out.data();
                add_into(adj, *x, g.len(), |s| {
                    for i in 0..out.rows() {
                        let r = i * c..i * c + i + 1;
                        let dot: f64 = r.clone().map(|p| g[p] * y[p]).sum();
                        for p in r {
                            s[p] += y[p] * (g[p] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let c = out.cols();
                let y = out.data();
                add_into(adj, *x, g.len(), |s| {
                    for i in 0..out.rows() {
                        let r = i * c..(i + 1) * c;
                        let gs: f64 = g[r.clone()].iter().sum();
                        for p in r {
                            s[p] += g[p] - y[p].exp() * gs;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = out.cols();
                let gm = val(*gamma).data();
                if need(*x) {
                    add_into(adj, *x, g.len(), |s| {
                        for (i, &rs) in rstd.iter().enumerate() {
                            let r = i * c..(i + 1) * c;
                            let gx: Vec<f64> = r.clone().map(|p| g[p] * gm[p - i * c]).collect();
                            let m1 = gx.iter().sum::<f64>() / c as f64;
                            let m2 = gx.iter().zip(&xhat[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                            for (j, p) in r.enumerate() {
                                s[p] += rs * (gx[j] - m1 - xhat[p] * m2);
                            }
                        }
                    });
                }
                if need(*gamma) {
                    add_into(adj, *gamma, c, |s| {
                        for (p, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                            s[p % c] += gv * xh;
                        }
                    });
                }
                if need(*beta) {
                    add_into(adj, *beta, c, |s| {
                        for (p, &gv) in g.iter().enumerate() {
                            s[p % c] += gv;
                        }
                    });
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                let len = out.cols();
                add_into(adj, *x, r * c, |s| {
                    for i in 0..r {
                        for j in 0..len {
                            s[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = val(*x).cols();
                let n = val(*x).len();
                add_into(adj, *x, n, |s| {
                    for (o, v) in s[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *o += v;
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let r = out.rows();
                let total = out.cols();
                let mut off = 0;
                for &x in xs {
                    let w = val(x).cols();
                    if need(x) {
                        add_into(adj, x, r * w, |s| {
                            for i in 0..r {
                                for j in 0..w {
                                    s[i * w + j] += g[i * total + off + j];
                                }
                            }
                        });
                    }
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = val(x).len();
                    if need(x) {
                        add_into(adj, x, n, |s| {
                            s.iter_mut().zip(&g[off..off + n]).for_each(|(o, v)| *o += v);
                        });
                    }
                    off += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let c = val(*x).cols();
                let n = val(*x).len();
                add_into(adj, *x, n, |s| {
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            s[i * c + j] += g[k * c + j];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                add_into(adj, *x, n, |s| s.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::OuterAdd(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (t_rows, i_rows, k) = (ta.rows(), tb.rows(), ta.cols());
                if need(*a) {
                    add_into(adj, *a, t_rows * k, |s| {
                        for t in 0..t_rows {
                            let srow = &mut s[t * k..(t + 1) * k];
                            for j in 0..i_rows {
                                let gr = &g[(t * i_rows + j) * k..(t * i_rows + j + 1) * k];
                                srow.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                            }
                        }
                    });
                }
                if need(*b) {
                    add_into(adj, *b, i_rows * k, |s| {
                        for t in 0..t_rows {
                            for j in 0..i_rows {
                                let gr = &g[(t * i_rows + j) * k..(t * i_rows + j + 1) * k];
                                s[j * k..(j + 1) * k].iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                            }
                        }
                    });
                }
            }
            Op::SegmentSoftmax { x, segs } => {
                let y = out.data();
                let n = val(*x).len();
                add_into(adj, *x, n, |s| {
                    for sg in 0..segs.count() {
                        let r = segs.range(sg);
                        let dot: f64 = r.clone().map(|k| g[k] * y[k]).sum();
                        for k in r {
                            s[segs.rows[k]] += y[k] * (g[k] - dot);
                        }
                    }
                });
            }
            Op::SegmentWeightedSum { w, e, segs } => {
                let (tw, te) = (val(*w), val(*e));
                let d = te.cols();
                if need(*w) {
                    add_into(adj, *w, tw.len(), |s| {
                        for sg in 0..segs.count() {
                            let gr = &g[sg * d..(sg + 1) * d];
                            for k in segs.range(sg) {
                                let er = &te.data()[segs.rows[k] * d..(segs.rows[k] + 1) * d];
                                s[k] += gr.iter().zip(er).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    });
                }
                if need(*e) {
                    add_into(adj, *e, te.len(), |s| {
                        for sg in 0..segs.count() {
                            let gr = &g[sg * d..(sg + 1) * d];
                            for k in segs.range(sg) {
                                let wk = tw.data()[k];
                                let row = segs.rows[k];
                                for (o, v) in s[row * d..(row + 1) * d].iter_mut().zip(gr) {
                                    *o += wk * v;
                                }
                            }
                        }
                    });
                }
            }
            Op::NllRows { x, targets, cols, correction } => {
                let tx = val(*x);
                let (r, c) = (tx.rows(), tx.cols());
                let scale = g[0] / r.max(1) as f64;
                add_into(adj, *x, r * c, |s| {
                    for (i, &tg) in targets.iter().enumerate() {
                        let row = &tx.data()[i * c..(i + 1) * c];
                        let srow = &mut s[i * c..(i + 1) * c];
                        match cols {
                            None => {
                                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                                for (o, v) in srow.iter_mut().zip(row) {
                                    *o += scale * (v - max).exp() / z;
                                }
                            }
                            Some(cols) => {
                                let logits = sampled_logits(row, tg, &cols[i], *correction);
                                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                                let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
                                srow[tg] += scale * (logits[0] - max).exp() / z;
                                for (&col, &l) in negatives(&cols[i], tg).zip(&logits[1..]) {
                                    srow[col] += scale * (l - max).exp() / z;
                                }
                            }
                        }
                        srow[tg] -= scale;
                    }
                });
            }
        }
    }
}

fn negatives(cols: &[usize], target: usize) -> impl Iterator<Item = &usize> {
    cols.iter().filter(move |&&c| c != target)
}

/// Target logit first, then corrected negative logits.
fn sampled_logits(row: &[f64], target: usize, cols: &[usize], correction: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(cols.len() + 1);
    out.push(row[target]);
    out.extend(negatives(cols, target).map(|&c| row[c] - correction));
    out
}
