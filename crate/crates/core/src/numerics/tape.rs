//! Reverse-mode automatic differentiation over whole tensors.
//!
//! Every op appends one node to the tape; `backward` walks the nodes in exact
//! reverse creation order, visiting each at most once.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::lstm::{lstm_backward, lstm_forward, LstmTrace, LstmWeights};
use super::param::{ParamId, ParamStore};
use super::tensor::{dot, matmul_nt_acc, matmul_tn_acc, sigmoid, Tensor};
use crate::error::{Error, Result};

/// Guard below which a cosine denominator is treated as zero.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Normalize each row over its columns.
    Rows,
    /// Normalize each column over its rows.
    Columns,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Tanh,
    Sigmoid,
}

enum Op {
    Leaf,
    Param,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRowBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Softmax(usize, Axis),
    Unfold { input: usize, window: usize },
    Lstm {
        x: usize,
        w_ih: usize,
        w_hh: usize,
        b: usize,
        trace: Box<LstmTrace>,
    },
    ConcatCols(Vec<usize>),
    SliceCols { input: usize, start: usize },
    SliceRows { input: usize, start: usize },
    Reshape(usize),
    Stack(Vec<usize>),
    Sum(usize),
    RowCosine { a: usize, b: usize, norms: Vec<(f64, f64)> },
    PairLogits {
        t1: usize,
        t2: usize,
        w: usize,
        b: Option<usize>,
    },
    Diag(usize),
    CrossEntropy { logits: usize, gold: usize, probs: Vec<f64> },
    GatherRows { table: usize, ids: Vec<usize> },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRowBias(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Diag(a) => vec![*a],
            Op::Unfold { input, .. } | Op::SliceCols { input, .. } | Op::SliceRows { input, .. } => {
                vec![*input]
            }
            Op::Lstm { x, w_ih, w_hh, b, .. } => vec![*x, *w_ih, *w_hh, *b],
            Op::ConcatCols(v) | Op::Stack(v) => v.clone(),
            Op::RowCosine { a, b, .. } => vec![*a, *b],
            Op::PairLogits { t1, t2, w, b } => {
                let mut v = vec![*t1, *t2, *w];
                v.extend(b);
                v
            }
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::GatherRows { table, .. } => vec![*table],
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears all recorded nodes so the tape can be reused.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.params.clear();
        self.consumed.set(false);
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        self.push_arc(Arc::new(value), op)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let needs_grad = match op {
            Op::Leaf => false,
            Op::Param => true,
            _ => op.inputs().iter().any(|&i| inner.nodes[i].needs_grad),
        };
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self, id }
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// A differentiable input that is not backed by a stored parameter.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Param)
    }

    /// Records parameter `id` (once per tape). Frozen parameters become constants.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.inner.borrow().params.get(&id) {
            return Var { tape: self, id: node };
        }
        let p = store.get(id);
        let op = if p.trainable { Op::Param } else { Op::Leaf };
        let var = self.push_arc(p.shared_value(), op);
        self.inner.borrow_mut().params.insert(id, var.id);
        var
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.inner.borrow().nodes[id].value)
    }

    /// Stacks scalars (or flattens tensors) into one column vector.
    pub fn stack(&self, parts: &[Var<'_>]) -> Var<'_> {
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(p.value().data());
        }
        let ids = parts.iter().map(|p| p.id).collect();
        self.push(Tensor::column(data), Op::Stack(ids))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[Var<'_>]) -> Result<Var<'_>> {
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| self.value(p.id)).collect();
        let n = values.first().map_or(0, |v| v.rows());
        if let Some(bad) = values.iter().find(|v| v.rows() != n) {
            return Err(Error::Dimension {
                op: "concat_cols",
                lhs: values[0].shape().to_vec(),
                rhs: bad.shape().to_vec(),
            });
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Tensor::new(vec![n, total], data)?, Op::ConcatCols(ids)))
    }

    /// Sums same-shaped values left to right, in slice order.
    pub fn add_all<'a>(&'a self, parts: &[Var<'a>]) -> Result<Var<'a>> {
        let (first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::Invalid("add_all of an empty list".into()))?;
        rest.iter().try_fold(*first, |acc, p| acc.add(*p))
    }

    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::Backward(
                "tape already consumed by a previous backward pass; reset it first".into(),
            ));
        }
        let inner = self.inner.borrow();
        let loss_value = &inner.nodes[loss.id].value;
        if !loss_value.is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                loss_value.shape()
            )));
        }
        self.consumed.set(true);
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::filled(loss_value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let params = inner.params.iter().map(|(&p, &n)| (p, n)).collect();
        Ok(Gradients { grads, params })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape()));
    f(slot.data_mut());
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let gd = g.data();
    match &nodes[id].op {
        Op::Leaf | Op::Param => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (n, m, p) = (av.rows(), av.cols(), bv.cols());
            accumulate(grads, nodes, *a, |da| matmul_nt_acc(gd, bv.data(), da, n, p, m));
            accumulate(grads, nodes, *b, |db| matmul_tn_acc(av.data(), gd, db, n, m, p));
        }
        Op::Transpose(a) => {
            let (n, m) = (out.rows(), out.cols());
            accumulate(grads, nodes, *a, |da| {
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] += gd[i * m + j];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            for x in [a, b] {
                accumulate(grads, nodes, *x, |dx| add_into(dx, gd));
            }
        }
        Op::AddRowBias(a, bias) => {
            accumulate(grads, nodes, *a, |da| add_into(da, gd));
            let m = out.cols();
            accumulate(grads, nodes, *bias, |db| {
                for row in gd.chunks(m) {
                    add_into(db, row);
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(grads, nodes, *a, |da| {
                for ((d, &gv), &y) in da.iter_mut().zip(gd).zip(bv.data()) {
                    *d += gv * y;
                }
            });
            accumulate(grads, nodes, *b, |db| {
                for ((d, &gv), &x) in db.iter_mut().zip(gd).zip(av.data()) {
                    *d += gv * x;
                }
            });
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, |da| {
            for (d, &gv) in da.iter_mut().zip(gd) {
                *d += c * gv;
            }
        }),
        Op::Tanh(a) => accumulate(grads, nodes, *a, |da| {
            for ((d, &gv), &y) in da.iter_mut().zip(gd).zip(out.data()) {
                *d += gv * (1.0 - y * y);
            }
        }),
        Op::Sigmoid(a) => accumulate(grads, nodes, *a, |da| {
            for ((d, &gv), &y) in da.iter_mut().zip(gd).zip(out.data()) {
                *d += gv * y * (1.0 - y);
            }
        }),
        Op::Softmax(a, axis) => {
            let (n, m) = (out.rows(), out.cols());
            let y = out.data();
            accumulate(grads, nodes, *a, |da| match axis {
                Axis::Columns => {
                    for j in 0..m {
                        let s: f64 = (0..n).map(|i| gd[i * m + j] * y[i * m + j]).sum();
                        for i in 0..n {
                            da[i * m + j] += y[i * m + j] * (gd[i * m + j] - s);
                        }
                    }
                }
                Axis::Rows => {
                    for i in 0..n {
                        let row = i * m..(i + 1) * m;
                        let s = dot(&gd[row.clone()], &y[row.clone()]);
                        for j in row {
                            da[j] += y[j] * (gd[j] - s);
                        }
                    }
                }
            });
        }
        Op::Unfold { input, window } => {
            let d = nodes[*input].value.cols();
            let rows = out.rows();
            let w = *window;
            accumulate(grads, nodes, *input, |da| {
                for t in 0..rows {
                    for k in 0..w {
                        let src = &gd[t * w * d + k * d..t * w * d + (k + 1) * d];
                        add_into(&mut da[(t + k) * d..(t + k + 1) * d], src);
                    }
                }
            });
        }
        Op::Lstm { x, w_ih, w_hh, b, trace } => {
            let xv = &nodes[*x].value;
            let (wi, wh, bv) = (&nodes[*w_ih].value, &nodes[*w_hh].value, &nodes[*b].value);
            let weights = LstmWeights {
                w_ih: wi.data(),
                w_hh: wh.data(),
                b: bv.data(),
                input: xv.cols(),
                hidden: out.cols(),
            };
            let lg = lstm_backward(&weights, xv.data(), trace, gd);
            accumulate(grads, nodes, *x, |d| add_into(d, &lg.dx));
            accumulate(grads, nodes, *w_ih, |d| add_into(d, &lg.dw_ih));
            accumulate(grads, nodes, *w_hh, |d| add_into(d, &lg.dw_hh));
            accumulate(grads, nodes, *b, |d| add_into(d, &lg.db));
        }
        Op::ConcatCols(parts) => {
            let (n, total) = (out.rows(), out.cols());
            let mut offset = 0;
            for &p in parts {
                let m = nodes[p].value.cols();
                accumulate(grads, nodes, p, |dp| {
                    for r in 0..n {
                        add_into(&mut dp[r * m..(r + 1) * m], &gd[r * total + offset..r * total + offset + m]);
                    }
                });
                offset += m;
            }
        }
        Op::SliceCols { input, start } => {
            let src_cols = nodes[*input].value.cols();
            let (n, m) = (out.rows(), out.cols());
            accumulate(grads, nodes, *input, |da| {
                for r in 0..n {
                    add_into(
                        &mut da[r * src_cols + start..r * src_cols + start + m],
                        &gd[r * m..(r + 1) * m],
                    );
                }
            });
        }
        Op::SliceRows { input, start } => {
            let m = out.cols();
            accumulate(grads, nodes, *input, |da| add_into(&mut da[start * m..start * m + gd.len()], gd));
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, |da| add_into(da, gd)),
        Op::Stack(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                accumulate(grads, nodes, p, |dp| add_into(dp, &gd[offset..offset + len]));
                offset += len;
            }
        }
        Op::Sum(a) => {
            let gv = gd[0];
            accumulate(grads, nodes, *a, |da| da.iter_mut().for_each(|d| *d += gv));
        }
        Op::RowCosine { a, b, norms } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let m = av.cols();
            let cos = out.data();
            // d cos / d a = b / (|a||b|) - cos * a / |a|^2
            accumulate(grads, nodes, *a, |da| {
                for (r, &(na, nb)) in norms.iter().enumerate() {
                    if na * nb < COSINE_EPS {
                        continue;
                    }
                    let (ar, br) = (av.row(r), bv.row(r));
                    for k in 0..m {
                        da[r * m + k] += gd[r] * (br[k] / (na * nb) - cos[r] * ar[k] / (na * na));
                    }
                }
            });
            accumulate(grads, nodes, *b, |db| {
                for (r, &(na, nb)) in norms.iter().enumerate() {
                    if na * nb < COSINE_EPS {
                        continue;
                    }
                    let (ar, br) = (av.row(r), bv.row(r));
                    for k in 0..m {
                        db[r * m + k] += gd[r] * (ar[k] / (na * nb) - cos[r] * br[k] / (nb * nb));
                    }
                }
            });
        }
        Op::PairLogits { t1, t2, w, b } => {
            let (t1v, t2v, wv) = (&nodes[*t1].value, &nodes[*t2].value, &nodes[*w].value);
            let (r, m) = (t1v.rows(), t1v.cols());
            let wd = wv.data();
            accumulate(grads, nodes, *t1, |d1| {
                for (u, v, idx) in off_diagonal_pairs(r) {
                    let gv = gd[u * r + v];
                    let wrow = &wd[idx * 2 * m..idx * 2 * m + m];
                    for k in 0..m {
                        d1[u * m + k] += gv * wrow[k];
                    }
                }
            });
            accumulate(grads, nodes, *t2, |d2| {
                for (u, v, idx) in off_diagonal_pairs(r) {
                    let gv = gd[u * r + v];
                    let wrow = &wd[idx * 2 * m + m..(idx + 1) * 2 * m];
                    for k in 0..m {
                        d2[v * m + k] += gv * wrow[k];
                    }
                }
            });
            accumulate(grads, nodes, *w, |dw| {
                for (u, v, idx) in off_diagonal_pairs(r) {
                    let gv = gd[u * r + v];
                    let base = idx * 2 * m;
                    for k in 0..m {
                        dw[base + k] += gv * t1v.at(u, k);
                        dw[base + m + k] += gv * t2v.at(v, k);
                    }
                }
            });
            if let Some(b) = b {
                accumulate(grads, nodes, *b, |db| {
                    for (u, v, idx) in off_diagonal_pairs(r) {
                        db[idx] += gd[u * r + v];
                    }
                });
            }
        }
        Op::Diag(a) => {
            let r = out.rows();
            accumulate(grads, nodes, *a, |da| {
                for (u, d) in da.iter_mut().enumerate() {
                    *d += gd[u * r + u];
                }
            });
        }
        Op::CrossEntropy { logits, gold, probs } => {
            let gv = gd[0];
            accumulate(grads, nodes, *logits, |dl| {
                for (i, (d, &p)) in dl.iter_mut().zip(probs).enumerate() {
                    let target = if i == *gold { 1.0 } else { 0.0 };
                    *d += gv * (p - target);
                }
            });
        }
        Op::GatherRows { table, ids } => {
            let d = out.cols();
            accumulate(grads, nodes, *table, |dt| {
                for (t, &row) in ids.iter().enumerate() {
                    // Row 0 is the out-of-vocabulary sentinel and stays the zero vector.
                    if row == 0 {
                        continue;
                    }
                    add_into(&mut dt[row * d..(row + 1) * d], &gd[t * d..(t + 1) * d]);
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Enumerates `(u, v, flat_index)` for all ordered pairs `u != v` of `0..r`,
/// with `flat_index = u * (r - 1) + (v if v < u else v - 1)`.
pub fn off_diagonal_pairs(r: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..r).flat_map(move |u| {
        (0..r)
            .filter(move |&v| v != u)
            .enumerate()
            .map(move |(j, v)| (u, v, u * (r.saturating_sub(1)) + j))
    })
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to `var`, if any flowed into it.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.grads[*n].as_ref())
    }

    /// Adds `scale * grad` into each reached parameter's `grad` slot.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) {
        let mut params = self.params.clone();
        params.sort();
        for (pid, node) in params {
            if let Some(g) = &self.grads[node] {
                let slot = &mut store.get_mut(pid).grad;
                for (d, v) in slot.data_mut().iter_mut().zip(g.data()) {
                    *d += scale * v;
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Shared handle to the forward value.
    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op)
    }

    fn dims_err(&self, op: &'static str, other: &Var<'_>) -> Error {
        Error::Dimension {
            op,
            lhs: self.shape(),
            rhs: other.shape(),
        }
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().matmul(&other.value())?;
        Ok(self.unary(value, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Var<'t> {
        let value = self.value().transpose();
        self.unary(value, Op::Transpose(self.id))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(self.dims_err("add", &other));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.unary(value, Op::Add(self.id, other.id)))
    }

    /// Adds a length-`m` bias to every row of an `n x m` matrix.
    pub fn add_row_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value(), bias.value());
            let m = a.cols();
            if b.len() != m || a.shape().len() != 2 {
                return Err(self.dims_err("add_row_bias", &bias));
            }
            let mut out = (*a).clone();
            for row in out.data_mut().chunks_mut(m) {
                add_into(row, b.data());
            }
            out
        };
        Ok(self.unary(value, Op::AddRowBias(self.id, bias.id)))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(self.dims_err("mul", &other));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.unary(value, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        let value = self.value().map(|v| v * factor);
        self.unary(value, Op::Scale(self.id, factor))
    }

    pub fn tanh(&self) -> Var<'t> {
        let value = self.value().map(f64::tanh);
        self.unary(value, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let value = self.value().map(sigmoid);
        self.unary(value, Op::Sigmoid(self.id))
    }

    pub fn pointwise(&self, f: Pointwise) -> Var<'t> {
        match f {
            Pointwise::Tanh => self.tanh(),
            Pointwise::Sigmoid => self.sigmoid(),
        }
    }

    /// Softmax of a 2-D tensor along `axis`, with max subtraction.
    pub fn softmax(&self, axis: Axis) -> Var<'t> {
        let value = softmax_values(&self.value(), axis);
        self.unary(value, Op::Softmax(self.id, axis))
    }

    /// Sliding-window row concatenation: row `t` of the `(n-w+1) x (w*d)`
    /// output is `[x_t, ..., x_{t+w-1}]`.
    pub fn unfold(&self, window: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let (n, d) = (x.rows(), x.cols());
            if window == 0 || n < window {
                return Err(Error::SequenceTooShort {
                    len: n,
                    required: window.max(1),
                });
            }
            let rows = n - window + 1;
            let data = x.data()[..].to_vec();
            let mut out = Vec::with_capacity(rows * window * d);
            for t in 0..rows {
                out.extend_from_slice(&data[t * d..(t + window) * d]);
            }
            Tensor::new(vec![rows, window * d], out)?
        };
        Ok(self.unary(value, Op::Unfold { input: self.id, window }))
    }

    /// Runs an LSTM over the rows of `self` (`n x d`) from a zero state.
    pub fn lstm(&self, w_ih: Var<'t>, w_hh: Var<'t>, b: Var<'t>, reverse: bool) -> Result<Var<'t>> {
        let (value, trace) = {
            let (x, wi, wh, bv) = (self.value(), w_ih.value(), w_hh.value(), b.value());
            let (n, d) = (x.rows(), x.cols());
            let u = wh.cols();
            if n == 0 {
                return Err(Error::EmptySequence("lstm input has no rows".into()));
            }
            if wi.shape() != [4 * u, d] || wh.shape() != [4 * u, u] || bv.len() != 4 * u {
                return Err(Error::Dimension {
                    op: "lstm",
                    lhs: x.shape().to_vec(),
                    rhs: wi.shape().to_vec(),
                });
            }
            let weights = LstmWeights {
                w_ih: wi.data(),
                w_hh: wh.data(),
                b: bv.data(),
                input: d,
                hidden: u,
            };
            let trace = lstm_forward(&weights, x.data(), n, reverse, None, None);
            (Tensor::new(vec![n, u], trace.h.clone())?, trace)
        };
        Ok(self.unary(
            value,
            Op::Lstm {
                x: self.id,
                w_ih: w_ih.id,
                w_hh: w_hh.id,
                b: b.id,
                trace: Box::new(trace),
            },
        ))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let (n, m) = (x.rows(), x.cols());
            if start > end || end > m {
                return Err(Error::Dimension {
                    op: "slice_cols",
                    lhs: x.shape().to_vec(),
                    rhs: vec![start, end],
                });
            }
            let mut data = Vec::with_capacity(n * (end - start));
            for r in 0..n {
                data.extend_from_slice(&x.row(r)[start..end]);
            }
            Tensor::new(vec![n, end - start], data)?
        };
        Ok(self.unary(value, Op::SliceCols { input: self.id, start }))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let (n, m) = (x.rows(), x.cols());
            if start > end || end > n {
                return Err(Error::Dimension {
                    op: "slice_rows",
                    lhs: x.shape().to_vec(),
                    rhs: vec![start, end],
                });
            }
            Tensor::new(vec![end - start, m], x.data()[start * m..end * m].to_vec())?
        };
        Ok(self.unary(value, Op::SliceRows { input: self.id, start }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = (*self.value()).clone().reshaped(shape.to_vec())?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.unary(value, Op::Sum(self.id))
    }

    /// Cosine similarity between matching rows; returns an `n x 1` column.
    /// A zero-norm row yields 0 with no gradient.
    pub fn row_cosine(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (value, norms) = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(self.dims_err("row_cosine", &other));
            }
            let mut norms = Vec::with_capacity(a.rows());
            let mut cos = Vec::with_capacity(a.rows());
            for r in 0..a.rows() {
                let (ar, br) = (a.row(r), b.row(r));
                let (na, nb) = (dot(ar, ar).sqrt(), dot(br, br).sqrt());
                norms.push((na, nb));
                cos.push(if na * nb < COSINE_EPS { 0.0 } else { dot(ar, br) / (na * nb) });
            }
            (Tensor::column(cos), norms)
        };
        Ok(self.unary(value, Op::RowCosine { a: self.id, b: other.id, norms }))
    }

    /// Pairwise linear scores between rows of `self` (`r x m`) and rows of
    /// `other`: entry `(u, v)` for `u != v` is
    /// `w[idx, :m] . self_u + w[idx, m:] . other_v + b[idx]`; the diagonal is 0.
    /// `w` is `r(r-1) x 2m`; see [`off_diagonal_pairs`] for `idx`.
    pub fn pair_logits(&self, other: Var<'t>, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
        let value = {
            let (t1, t2, wv) = (self.value(), other.value(), w.value());
            let (r, m) = (t1.rows(), t1.cols());
            let pairs = r * r.saturating_sub(1);
            if t1.shape() != t2.shape() || wv.shape() != [pairs, 2 * m] {
                return Err(Error::Dimension {
                    op: "pair_logits",
                    lhs: t1.shape().to_vec(),
                    rhs: wv.shape().to_vec(),
                });
            }
            let bias = b.map(|b| b.value().data().to_vec());
            if bias.as_ref().is_some_and(|bv| bv.len() != pairs) {
                return Err(Error::Dimension {
                    op: "pair_logits bias",
                    lhs: vec![pairs],
                    rhs: b.map(|b| b.shape()).unwrap_or_default(),
                });
            }
            let mut out = Tensor::zeros(&[r, r]);
            let wd = wv.data();
            for (u, v, idx) in off_diagonal_pairs(r) {
                let base = idx * 2 * m;
                let mut s = dot(&wd[base..base + m], t1.row(u)) + dot(&wd[base + m..base + 2 * m], t2.row(v));
                if let Some(bv) = &bias {
                    s += bv[idx];
                }
                out.data_mut()[u * r + v] = s;
            }
            out
        };
        Ok(self.unary(
            value,
            Op::PairLogits {
                t1: self.id,
                t2: other.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
        ))
    }

    /// Length-`r` vector to an `r x r` diagonal matrix.
    pub fn diag(&self) -> Var<'t> {
        let value = {
            let v = self.value();
            let r = v.len();
            let mut out = Tensor::zeros(&[r, r]);
            for (u, &x) in v.data().iter().enumerate() {
                out.data_mut()[u * r + u] = x;
            }
            out
        };
        self.unary(value, Op::Diag(self.id))
    }

    /// `-log softmax(self)[gold]` for a vector of logits.
    pub fn cross_entropy(&self, gold: usize) -> Result<Var<'t>> {
        let (loss, probs) = {
            let logits = self.value();
            if gold >= logits.len() {
                return Err(Error::Invalid(format!(
                    "gold index {gold} out of range for {} candidates",
                    logits.len()
                )));
            }
            let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.data().iter().map(|&l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let loss = -(logits.data()[gold] - max - z.ln());
            (loss, exps.iter().map(|e| e / z).collect())
        };
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                gold,
                probs,
            },
        ))
    }

    /// Selects rows of a table (`|V| x d`) by id.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t>> {
        let value = {
            let t = self.value();
            let d = t.cols();
            let mut data = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                if i >= t.rows() {
                    return Err(Error::Corrupt(format!(
                        "token id {i} out of range for table with {} rows",
                        t.rows()
                    )));
                }
                data.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![ids.len(), d], data)?
        };
        Ok(self.unary(
            value,
            Op::GatherRows {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout(&self, rate: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var<'t>> {
        check_dropout_rate(rate)?;
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(*self);
        }
        let shape = self.shape();
        let keep = 1.0 / (1.0 - rate);
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = self.tape.constant(Tensor::new(shape, mask)?);
        self.mul(mask)
    }
}

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

pub fn softmax_values(x: &Tensor, axis: Axis) -> Tensor {
    let (n, m) = (x.rows(), x.cols());
    let mut out = x.clone();
    let d = out.data_mut();
    match axis {
        Axis::Columns => {
            for j in 0..m {
                let max = (0..n).map(|i| d[i * m + j]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..n {
                    let e = (d[i * m + j] - max).exp();
                    d[i * m + j] = e;
                    z += e;
                }
                for i in 0..n {
                    d[i * m + j] /= z;
                }
            }
        }
        Axis::Rows => {
            for row in d.chunks_mut(m) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
        }
    }
    out
}

/// Runs a single-step LSTM cell built from primitive tape ops.
///
/// `x` is `1 x d`, `h_prev`/`c_prev` are `1 x u`. Used as the reference for
/// the fused sequence op and exposed for single-step use.
pub fn lstm_cell<'t>(
    x: Var<'t>,
    h_prev: Var<'t>,
    c_prev: Var<'t>,
    w_ih: Var<'t>,
    w_hh: Var<'t>,
    b: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let u = h_prev.value().cols();
    if w_ih.value().rows() != 4 * u || w_hh.shape() != [4 * u, u] || b.value().len() != 4 * u {
        return Err(Error::Dimension {
            op: "lstm_cell",
            lhs: w_ih.shape(),
            rhs: h_prev.shape(),
        });
    }
    let b_row = b.reshape(&[1, 4 * u])?;
    let gates = x
        .matmul(w_ih.transpose())?
        .add(h_prev.matmul(w_hh.transpose())?)?
        .add(b_row)?;
    let i = gates.slice_cols(0, u)?.sigmoid();
    let f = gates.slice_cols(u, 2 * u)?.sigmoid();
    let g = gates.slice_cols(2 * u, 3 * u)?.tanh();
    let o = gates.slice_cols(3 * u, 4 * u)?.sigmoid();
    let c = f.mul(c_prev)?.add(i.mul(g)?)?;
    let h = o.mul(c.tanh())?;
    Ok((h, c))
}
