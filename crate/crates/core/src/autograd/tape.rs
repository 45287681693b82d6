use std::collections::HashMap;

use rand::Rng;

use super::tensor::{gemm, GemmOperand};
use super::{ParamId, ParamStore, Tensor};
use crate::entmax;
use crate::error::{Error, Result};
use crate::kuma;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right-hand operand of a binary elementwise op is expanded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `1×n` repeated down the rows.
    Row,
    /// `m×1` repeated across the columns.
    Col,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`.
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Pow(Var, f64),
    ClampMin(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, Tensor),
    Dropout(Var, Tensor),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    HardKuma {
        a: Var,
        b: Var,
        dh_da: Tensor,
        dh_db: Tensor,
    },
    EntmaxRows {
        x: Var,
        raw: Option<Var>,
        alpha: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for one reverse pass.
///
/// Values are appended in evaluation order, so every op's inputs precede it
/// and the reverse sweep is a simple backwards scan.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    consumed: bool,
}

/// Gradients of trainable leaves produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    bound: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    /// Adds the gradient of every bound parameter into `store`, scaled.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) {
        for &(id, idx) in &self.bound {
            if let Some(g) = self.leaves.get(&idx) {
                if scale == 1.0 {
                    store.accumulate_grad(id, g);
                } else {
                    store.accumulate_grad(id, &g.map(|v| v * scale));
                }
            }
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
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

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(!self.consumed, "recording on a consumed tape");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free-standing differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Places a parameter on the tape; repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.requires_grad);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = Tensor::zeros(ta.rows(), tb.cols());
        gemm(GemmOperand::plain(ta), GemmOperand::plain(tb), &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(mismatch("matmul_t", ta, tb));
        }
        let mut out = Tensor::zeros(ta.rows(), tb.rows());
        gemm(
            GemmOperand::plain(ta),
            GemmOperand::transposed(tb),
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Bcast::Same)
        } else if tb.rows() == 1 && tb.cols() == ta.cols() {
            Ok(Bcast::Row)
        } else if tb.cols() == 1 && tb.rows() == ta.rows() {
            Ok(Bcast::Col)
        } else {
            Err(mismatch(op, ta, tb))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let kind = self.bcast(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.cols();
        let mut out = ta.clone();
        for (idx, o) in out.data_mut().iter_mut().enumerate() {
            let bv = match kind {
                Bcast::Same => tb.data()[idx],
                Bcast::Row => tb.data()[idx % cols],
                Bcast::Col => tb.data()[idx / cols],
            };
            *o = f(*o, bv);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op(a, b, kind), rg))
    }

    /// Elementwise sum; `b` may also be a `1×n` row or `m×1` column.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).map(|v| scale * v + shift);
        let rg = self.rg(a);
        self.push(out, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("log of a nonpositive value".into()));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |v| v.powf(p), Op::Pow(a, p))
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |v| v.max(floor), Op::ClampMin(a, floor))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            entmax::softmax_into(x.row(r), out.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    /// Per-row standardisation `(x - μ) / sqrt(σ² + eps)`, no affine part.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.cols() as f64;
        let mut out = x.clone();
        let mut inv_std = Tensor::zeros(x.rows(), 1);
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.set(r, 0, is);
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNormRows(a, inv_std), rg)
    }

    /// Inverted dropout: zeroes entries with probability `p` and rescales the
    /// survivors by `1/(1-p)`. Identity when `train` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, train: bool, rng: &mut R) -> Var {
        if !train || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let x = self.value(a);
        let mask = Tensor::from_fn(x.rows(), x.cols(), |_, _| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let mut out = x.clone();
        for (o, m) in out.data_mut().iter_mut().zip(mask.data()) {
            *o *= m;
        }
        let rg = self.rg(a);
        self.push(out, Op::Dropout(a, mask), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / t.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Row sums as an `m×1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::from_fn(t.rows(), 1, |r, _| t.row(r).iter().sum());
        let rg = self.rg(a);
        self.push(out, Op::SumRows(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(mismatch("concat_cols", self.value(first), self.value(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.cols() {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: t.shape(),
                rhs: (start, end),
            });
        }
        let out = Tensor::from_fn(t.rows(), end - start, |r, c| t.get(r, start + c));
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    /// Stacks the listed rows of `a` (embedding lookup, row selection).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: t.shape(),
                rhs: (bad, 0),
            });
        }
        let mut out = Tensor::zeros(idx.len(), t.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// `out[r] = a[r, idx[r]]` as an `m×1` column.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if idx.len() != t.rows() || idx.iter().any(|&i| i >= t.cols()) {
            return Err(Error::ShapeMismatch {
                op: "pick_cols",
                lhs: t.shape(),
                rhs: (idx.len(), 1),
            });
        }
        let out = Tensor::from_fn(t.rows(), 1, |r, _| t.get(r, idx[r]));
        let rg = self.rg(a);
        Ok(self.push(out, Op::PickCols(a, idx.to_vec()), rg))
    }

    /// Elementwise HardKuma draw with shape matrices `a`, `b` and fixed noise.
    pub fn hardkuma(&mut self, a: Var, b: Var, noise: &Tensor, l: f64, r: f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("hardkuma", ta, tb));
        }
        if noise.shape() != ta.shape() {
            return Err(mismatch("hardkuma", ta, noise));
        }
        if ta.data().iter().chain(tb.data()).any(|&v| !(v > 0.0)) {
            return Err(Error::Domain("hardkuma shapes must be positive".into()));
        }
        let (rows, cols) = ta.shape();
        let mut h = Tensor::zeros(rows, cols);
        let mut dh_da = Tensor::zeros(rows, cols);
        let mut dh_db = Tensor::zeros(rows, cols);
        for i in 0..ta.len() {
            let d = kuma::hardkuma_draw(ta.data()[i], tb.data()[i], l, r, noise.data()[i]);
            h.data_mut()[i] = d.h;
            dh_da.data_mut()[i] = d.dh_da;
            dh_db.data_mut()[i] = d.dh_db;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(h, Op::HardKuma { a, b, dh_da, dh_db }, rg))
    }

    /// Row-wise α-entmax with α = 1 + sigmoid(raw), `raw` a `1×1` value.
    pub fn entmax_rows(&mut self, x: Var, raw: Var) -> Result<Var> {
        if self.shape(raw) != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "entmax_rows",
                lhs: self.shape(x),
                rhs: self.shape(raw),
            });
        }
        let alpha = entmax::alpha_from_raw(self.value(raw).item());
        self.entmax_rows_inner(x, Some(raw), alpha)
    }

    /// Row-wise α-entmax at a fixed α ∈ (1, 2].
    pub fn entmax_rows_fixed(&mut self, x: Var, alpha: f64) -> Result<Var> {
        if !(alpha > 1.0 && alpha <= 2.0) {
            return Err(Error::AlphaOutOfRange(alpha));
        }
        self.entmax_rows_inner(x, None, alpha)
    }

    fn entmax_rows_inner(&mut self, x: Var, raw: Option<Var>, alpha: f64) -> Result<Var> {
        let t = self.value(x);
        if t.cols() == 0 {
            return Err(Error::Empty("entmax_rows"));
        }
        if !t.is_finite() {
            return Err(Error::Domain("entmax input must be finite".into()));
        }
        let mut out = t.clone();
        for r in 0..t.rows() {
            entmax::entmax_into(t.row(r), alpha, out.row_mut(r));
        }
        let rg = self.rg(x) || raw.is_some_and(|v| self.rg(v));
        Ok(self.push(out, Op::EntmaxRows { x, raw, alpha }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape: recorded values
    /// are dropped and a second call fails.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;
        let nodes = std::mem::take(&mut self.nodes);
        let bound = std::mem::take(&mut self.bound);
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&nodes, i, &g, &mut grads);
        }
        let mut leaves = HashMap::new();
        for (i, node) in nodes.iter().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()));
                leaves.insert(i, g);
            }
        }
        let mut bound: Vec<(ParamId, usize)> = bound.into_iter().map(|(id, v)| (id, v.0)).collect();
        bound.sort();
        Ok(Gradients { leaves, bound })
    }
}

/// Returns the accumulator for node `j`, creating it on first use.
fn slot<'g>(grads: &'g mut [Option<Tensor>], nodes: &[Node], j: Var) -> Option<&'g mut Tensor> {
    if !nodes[j.0].requires_grad {
        return None;
    }
    let (r, c) = nodes[j.0].value.shape();
    Some(grads[j.0].get_or_insert_with(|| Tensor::zeros(r, c)))
}

fn add_reduced(acc: &mut Tensor, g: &Tensor, kind: Bcast, sign: f64) {
    let cols = g.cols();
    let dst = acc.data_mut();
    match kind {
        Bcast::Same => {
            for (d, v) in dst.iter_mut().zip(g.data()) {
                *d += sign * v;
            }
        }
        Bcast::Row => {
            for (i, v) in g.data().iter().enumerate() {
                dst[i % cols] += sign * v;
            }
        }
        Bcast::Col => {
            for (i, v) in g.data().iter().enumerate() {
                dst[i / cols] += sign * v;
            }
        }
    }
}

fn bcast_at(t: &Tensor, kind: Bcast, idx: usize, cols: usize) -> f64 {
    match kind {
        Bcast::Same => t.data()[idx],
        Bcast::Row => t.data()[idx % cols],
        Bcast::Col => t.data()[idx / cols],
    }
}

/// Chain rule for a unary op given `dy/dx` as a function of `(x, y)`.
fn unary_back(
    grads: &mut [Option<Tensor>],
    nodes: &[Node],
    a: Var,
    y: &Tensor,
    g: &Tensor,
    d: impl Fn(f64, f64) -> f64,
) {
    let x = nodes[a.0].value.data();
    if let Some(acc) = slot(grads, nodes, a) {
        for (((dst, &xv), &yv), &gv) in acc.data_mut().iter_mut().zip(x).zip(y.data()).zip(g.data()) {
            *dst += gv * d(xv, yv);
        }
    }
}

fn propagate(nodes: &[Node], i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let y = &nodes[i].value;
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            if let Some(acc) = slot(grads, nodes, a) {
                gemm(GemmOperand::plain(g), GemmOperand::transposed(val(b)), acc, 1.0);
            }
            if let Some(acc) = slot(grads, nodes, b) {
                gemm(GemmOperand::transposed(val(a)), GemmOperand::plain(g), acc, 1.0);
            }
        }
        &Op::MatMulT(a, b) => {
            // y = a bᵀ: da = g b, db = gᵀ a
            if let Some(acc) = slot(grads, nodes, a) {
                gemm(GemmOperand::plain(g), GemmOperand::plain(val(b)), acc, 1.0);
            }
            if let Some(acc) = slot(grads, nodes, b) {
                gemm(GemmOperand::transposed(g), GemmOperand::plain(val(a)), acc, 1.0);
            }
        }
        &Op::Transpose(a) => {
            if let Some(acc) = slot(grads, nodes, a) {
                acc.add_assign(&g.transpose());
            }
        }
        &Op::Add(a, b, kind) | &Op::Sub(a, b, kind) => {
            let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if let Some(acc) = slot(grads, nodes, a) {
                acc.add_assign(g);
            }
            if let Some(acc) = slot(grads, nodes, b) {
                add_reduced(acc, g, kind, sign);
            }
        }
        &Op::Mul(a, b, kind) => {
            let cols = g.cols();
            let (ta, tb) = (val(a), val(b));
            if let Some(acc) = slot(grads, nodes, a) {
                for (idx, dst) in acc.data_mut().iter_mut().enumerate() {
                    *dst += g.data()[idx] * bcast_at(tb, kind, idx, cols);
                }
            }
            if let Some(acc) = slot(grads, nodes, b) {
                let prod = Tensor::new(
                    g.rows(),
                    cols,
                    g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect(),
                )
                .expect("same shape");
                add_reduced(acc, &prod, kind, 1.0);
            }
        }
        &Op::Affine(a, s) => unary_back(grads, nodes, a, y, g, |_, _| s),
        &Op::Relu(a) => unary_back(grads, nodes, a, y, g, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
        &Op::Sigmoid(a) => unary_back(grads, nodes, a, y, g, |_, y| y * (1.0 - y)),
        &Op::Softplus(a) => unary_back(grads, nodes, a, y, g, |x, _| sigmoid(x)),
        &Op::Exp(a) => unary_back(grads, nodes, a, y, g, |_, y| y),
        &Op::Log(a) => unary_back(grads, nodes, a, y, g, |x, _| 1.0 / x),
        &Op::Pow(a, p) => unary_back(grads, nodes, a, y, g, |x, _| p * x.powf(p - 1.0)),
        &Op::ClampMin(a, f) => unary_back(grads, nodes, a, y, g, |x, _| if x > f { 1.0 } else { 0.0 }),
        &Op::SoftmaxRows(a) => {
            if let Some(acc) = slot(grads, nodes, a) {
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((d, &p), &q) in acc.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d += p * (q - dot);
                    }
                }
            }
        }
        &Op::LogSoftmaxRows(a) => {
            if let Some(acc) = slot(grads, nodes, a) {
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    for ((d, &ly), &q) in acc.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d += q - ly.exp() * total;
                    }
                }
            }
        }
        Op::LayerNormRows(a, inv_std) => {
            if let Some(acc) = slot(grads, nodes, *a) {
                let n = y.cols() as f64;
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                    let is = inv_std.get(r, 0);
                    for ((d, &yv), &gv) in acc.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d += is * (gv - mg - yv * mgy);
                    }
                }
            }
        }
        Op::Dropout(a, mask) => {
            if let Some(acc) = slot(grads, nodes, *a) {
                for ((d, &m), &gv) in acc.data_mut().iter_mut().zip(mask.data()).zip(g.data()) {
                    *d += gv * m;
                }
            }
        }
        &Op::Sum(a) => {
            let s = g.item();
            if let Some(acc) = slot(grads, nodes, a) {
                acc.data_mut().iter_mut().for_each(|d| *d += s);
            }
        }
        &Op::Mean(a) => {
            if let Some(acc) = slot(grads, nodes, a) {
                let s = g.item() / acc.len().max(1) as f64;
                acc.data_mut().iter_mut().for_each(|d| *d += s);
            }
        }
        &Op::SumRows(a) => {
            if let Some(acc) = slot(grads, nodes, a) {
                for r in 0..acc.rows() {
                    let s = g.get(r, 0);
                    acc.row_mut(r).iter_mut().for_each(|d| *d += s);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for &p in parts {
                let w = val(p).cols();
                if let Some(acc) = slot(grads, nodes, p) {
                    for r in 0..g.rows() {
                        for (d, s) in acc.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                            *d += s;
                        }
                    }
                }
                off += w;
            }
        }
        &Op::SliceCols(a, start) => {
            if let Some(acc) = slot(grads, nodes, a) {
                for r in 0..g.rows() {
                    for (d, s) in acc.row_mut(r)[start..start + g.cols()].iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
            }
        }
        Op::GatherRows(a, idx) => {
            if let Some(acc) = slot(grads, nodes, *a) {
                for (r, &src) in idx.iter().enumerate() {
                    for (d, s) in acc.row_mut(src).iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
            }
        }
        Op::PickCols(a, idx) => {
            if let Some(acc) = slot(grads, nodes, *a) {
                for (r, &c) in idx.iter().enumerate() {
                    let v = acc.get(r, c) + g.get(r, 0);
                    acc.set(r, c, v);
                }
            }
        }
        Op::HardKuma { a, b, dh_da, dh_db } => {
            for (v, d) in [(*a, dh_da), (*b, dh_db)] {
                if let Some(acc) = slot(grads, nodes, v) {
                    for ((dst, &dv), &gv) in acc.data_mut().iter_mut().zip(d.data()).zip(g.data()) {
                        *dst += gv * dv;
                    }
                }
            }
        }
        &Op::EntmaxRows { x, raw, alpha } => {
            let input = val(x);
            let cols = input.cols();
            if let Some(acc) = slot(grads, nodes, x) {
                let mut buf = vec![0.0; cols];
                for r in 0..y.rows() {
                    if entmax::entmax_backward_into(y.row(r), g.row(r), alpha, &mut buf) {
                        for (d, b) in acc.row_mut(r).iter_mut().zip(&buf) {
                            *d += b;
                        }
                    }
                }
            }
            if let Some(raw) = raw {
                if let Some(acc) = slot(grads, nodes, raw) {
                    let mut scratch = vec![0.0; cols];
                    let d_alpha: f64 = (0..y.rows())
                        .map(|r| entmax::alpha_sensitivity(input.row(r), alpha, g.row(r), &mut scratch))
                        .sum();
                    acc.data_mut()[0] += d_alpha * entmax::raw_chain(alpha);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn relu_and_sigmoid_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![-1.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).item(), 0.5);
    }

    #[test]
    fn identity_matmul_on_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = rand_tensor(&mut rng, 3, 5);
        let i = tape.constant(Tensor::eye(3));
        let xv = tape.constant(x.clone());
        let y = tape.matmul(i, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(4, 5));
        let e = tape.add(a, b).unwrap_err().to_string();
        assert!(e.contains("add") && e.contains("(2, 3)") && e.contains("(4, 5)"), "{e}");
        assert!(tape.matmul(a, b).unwrap_err().to_string().contains("matmul"));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(1, 4));
        let s = tape.sigmoid(x);
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss((2, 2)))));
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::TapeConsumed)));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, 4, 4));
        let y = tape.dropout(x, 0.5, false, &mut rng);
        assert_eq!(x, y);
        let z = tape.dropout(x, 0.5, true, &mut rng);
        let (xv, zv) = (tape.value(x).clone(), tape.value(z).clone());
        for (a, b) in xv.data().iter().zip(zv.data()) {
            assert!(*b == 0.0 || (*b - 2.0 * a).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0));
        let mut tape = Tape::new();
        let w1 = tape.param(&store, id);
        let w2 = tape.param(&store, id);
        assert_eq!(w1, w2);
        let y = tape.mul(w1, w2).unwrap();
        let g = tape.backward(y).unwrap();
        g.accumulate_into(&mut store, 1.0);
        assert_eq!(store.grad(id).unwrap().item(), 4.0);
    }

    // Each closure rebuilds the graph from scratch; the checker compares the
    // tape gradient with central differences of the forward value alone.
    #[test]
    fn elementwise_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let a = rand_tensor(&mut rng, 3, 4);
            let b = rand_tensor(&mut rng, 3, 4);
            let row = rand_tensor(&mut rng, 1, 4);
            let col = rand_tensor(&mut rng, 3, 1);
            let w = rand_tensor(&mut rng, 4, 2);
            let err = check_gradients(&[a, b, row, col, w], |t, v| {
                let s = t.add(v[0], v[2])?;
                let m = t.mul(s, v[1])?;
                let c = t.mul(m, v[3])?;
                let d = t.sub(c, v[3])?;
                let sp = t.softplus(d);
                let sg = t.sigmoid(v[1]);
                let rl = t.relu(v[0]);
                let e = t.add(sp, sg)?;
                let e = t.add(e, rl)?;
                let ex = t.scale(v[1], 0.3);
                let ex = t.exp(ex);
                let e = t.mul(e, ex)?;
                let pw = t.pow(sp, 1.7);
                let e = t.add(e, pw)?;
                let lg = t.log(sp)?;
                let e = t.sub(e, lg)?;
                let mm = t.matmul(e, v[4])?;
                let tr = t.transpose(mm);
                let l = t.sum(tr);
                Ok(l)
            })
            .unwrap();
            assert!(err < 1e-6, "rel err {err}");
        }
    }

    #[test]
    fn structural_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let a = rand_tensor(&mut rng, 4, 6);
            let b = rand_tensor(&mut rng, 4, 3);
            let e = rand_tensor(&mut rng, 5, 6);
            let err = check_gradients(&[a, b, e], |t, v| {
                let c = t.concat_cols(&[v[0], v[1]])?;
                let s = t.slice_cols(c, 2, 8)?;
                let ln = t.layer_norm_rows(s, 1e-5);
                let sm = t.softmax_rows(ln);
                let g = t.gather_rows(v[2], &[3, 0, 0, 4])?;
                let mt = t.matmul_t(sm, g)?;
                let ls = t.log_softmax_rows(mt);
                let pk = t.pick_cols(ls, &[0, 3, 1, 2])?;
                let rs = t.sum_rows(sm);
                let rs = t.clamp_min(rs, -10.0);
                let q = t.mul(pk, rs)?;
                let m = t.mean(q);
                Ok(m)
            })
            .unwrap();
            assert!(err < 1e-6, "rel err {err}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut tape = Tape::new();
            let x = tape.constant(rand_tensor(&mut rng, 3, 3));
            let d = tape.dropout(x, 0.5, true, &mut rng);
            let s = tape.softmax_rows(d);
            tape.value(s).clone()
        };
        assert_eq!(run(), run());
    }
}
