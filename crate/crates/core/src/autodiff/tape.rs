use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{NodeRef, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Identifies an operation kind, for diagnostics and the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Variable,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    ScalarMul,
    AddScalar,
    BroadcastAdd,
    BroadcastMul,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Powf,
    Huber,
    ClampMin,
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    SumLastAxis,
    MeanFirstAxis,
    Concat,
    Columns,
    Pick,
}

impl OpKind {
    pub const ALL: [OpKind; 27] = [
        OpKind::Variable,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::ScalarMul,
        OpKind::AddScalar,
        OpKind::BroadcastAdd,
        OpKind::BroadcastMul,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Abs,
        OpKind::Powf,
        OpKind::Huber,
        OpKind::ClampMin,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumLastAxis,
        OpKind::MeanFirstAxis,
        OpKind::Concat,
        OpKind::Columns,
        OpKind::Pick,
    ];

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Variable => "variable",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::ScalarMul => "scalar_mul",
            OpKind::AddScalar => "add_scalar",
            OpKind::BroadcastAdd => "broadcast_add",
            OpKind::BroadcastMul => "broadcast_mul",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Abs => "abs",
            OpKind::Powf => "powf",
            OpKind::Huber => "huber",
            OpKind::ClampMin => "clamp_min",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumLastAxis => "sum_last_axis",
            OpKind::MeanFirstAxis => "mean_first_axis",
            OpKind::Concat => "concat",
            OpKind::Columns => "columns",
            OpKind::Pick => "pick",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Variable,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    ScalarMul(f64),
    AddScalar,
    BroadcastAdd,
    BroadcastMul,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Powf(f64),
    Huber(f64),
    ClampMin(f64),
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    SumLastAxis,
    MeanFirstAxis,
    Concat,
    Columns(usize, usize),
    Pick(Arc<Vec<usize>>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Variable => OpKind::Variable,
            Op::MatMul => OpKind::MatMul,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Div => OpKind::Div,
            Op::ScalarMul(_) => OpKind::ScalarMul,
            Op::AddScalar => OpKind::AddScalar,
            Op::BroadcastAdd => OpKind::BroadcastAdd,
            Op::BroadcastMul => OpKind::BroadcastMul,
            Op::Relu => OpKind::Relu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Exp => OpKind::Exp,
            Op::Log => OpKind::Log,
            Op::Abs => OpKind::Abs,
            Op::Powf(_) => OpKind::Powf,
            Op::Huber(_) => OpKind::Huber,
            Op::ClampMin(_) => OpKind::ClampMin,
            Op::Softmax => OpKind::Softmax,
            Op::LogSoftmax => OpKind::LogSoftmax,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::SumLastAxis => OpKind::SumLastAxis,
            Op::MeanFirstAxis => OpKind::MeanFirstAxis,
            Op::Concat => OpKind::Concat,
            Op::Columns(..) => OpKind::Columns,
            Op::Pick(_) => OpKind::Pick,
        }
    }
}

#[derive(Debug, Clone)]
struct Operand {
    index: Option<usize>,
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<Operand>,
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
}

/// Define-by-run record of executed operations.
///
/// An operation is recorded only when at least one input is tracked by this
/// tape; otherwise it evaluates eagerly and returns a constant.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// dRoot/dTensor, or `None` if the tensor is not tracked by the tape that produced these gradients.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let node = t.node()?;
        if node.tape != self.tape {
            return None;
        }
        self.grads.get(node.index).map(Vec::as_slice)
    }
}

fn shape_err(op: OpKind, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op: op.name(),
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn require_rank2(op: OpKind, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(shape_err(op, t.shape(), &[])),
    }
}

/// Output shape under same-rank broadcasting (each extent equal, or 1 on one side).
fn broadcast_shape(op: OpKind, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(shape_err(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(shape_err(op, a, b)),
        })
        .collect()
}

/// For every element of `out`, the flat index into an operand of shape `src`.
fn broadcast_index(out: &[usize], src: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    let mut strides = vec![0usize; src.len()];
    let mut acc = 1;
    for d in (0..src.len()).rev() {
        strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let mut idx = Vec::with_capacity(n);
    let mut coord = vec![0usize; out.len()];
    for _ in 0..n {
        idx.push(coord.iter().zip(&strides).map(|(c, s)| c * s).sum());
        for d in (0..out.len()).rev() {
            coord[d] += 1;
            if coord[d] < out[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    idx
}

/// `out[n, m] += a[n, k] * b[k, m]`.
fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    out
}

fn log_softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

fn huber(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        0.5 * x * x / beta
    } else {
        x.abs() - 0.5 * beta
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Number of recorded operations (including variables).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops the record. Every tensor issued so far becomes stale.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.id = fresh_id();
    }

    /// Negates every gradient contribution of `kind` during backward.
    ///
    /// Test fixture for the gradient checker's sensitivity; never set in
    /// normal use.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Smallest distance between any recorded input of `relu`, `abs` or
    /// `clamp_min` and that op's non-differentiable point. Infinite if none.
    ///
    /// Finite differences straddling a kink are meaningless, so the gradient
    /// checker redraws inputs when this is small.
    #[doc(hidden)]
    pub fn kink_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for node in &self.nodes {
            let kink = match node.op {
                Op::Relu | Op::Abs => 0.0,
                Op::ClampMin(floor) => floor,
                _ => continue,
            };
            for v in node.inputs[0].values.iter() {
                best = best.min((v - kink).abs());
            }
        }
        best
    }

    /// Registers `t`'s values as a differentiable leaf on this tape.
    pub fn variable(&mut self, t: Tensor) -> Tensor {
        let shape = t.shape().to_vec();
        let value = t.shared_values();
        self.nodes.push(Node {
            op: Op::Variable,
            inputs: Vec::new(),
            shape: shape.clone(),
            value: Arc::clone(&value),
        });
        Tensor::tracked(
            shape,
            value,
            NodeRef {
                tape: self.id,
                index: self.nodes.len() - 1,
            },
        )
    }

    fn operand(&self, t: &Tensor) -> Result<Operand> {
        let index = match t.node() {
            None => None,
            Some(n) if n.tape == self.id && n.index < self.nodes.len() => Some(n.index),
            Some(_) => return Err(Error::StaleTensor),
        };
        Ok(Operand {
            index,
            shape: t.shape().to_vec(),
            values: t.shared_values(),
        })
    }

    fn record(&mut self, op: Op, inputs: &[&Tensor], shape: Vec<usize>, value: Vec<f64>) -> Result<Tensor> {
        let operands = inputs
            .iter()
            .map(|t| self.operand(t))
            .collect::<Result<Vec<_>>>()?;
        let value = Arc::new(value);
        if operands.iter().all(|o| o.index.is_none()) {
            return Tensor::new(shape, Arc::unwrap_or_clone(value));
        }
        self.nodes.push(Node {
            op,
            inputs: operands,
            shape: shape.clone(),
            value: Arc::clone(&value),
        });
        Ok(Tensor::tracked(
            shape,
            value,
            NodeRef {
                tape: self.id,
                index: self.nodes.len() - 1,
            },
        ))
    }

    fn unary(&mut self, op: Op, x: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let v = x.values().iter().map(|&a| f(a)).collect();
        self.record(op, &[x], x.shape().to_vec(), v)
    }

    fn same_shape(&mut self, op: Op, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(shape_err(op.kind(), a.shape(), b.shape()));
        }
        let v = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
        self.record(op, &[a, b], a.shape().to_vec(), v)
    }

    fn broadcast(&mut self, op: Op, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let shape = broadcast_shape(op.kind(), a.shape(), b.shape())?;
        let ia = broadcast_index(&shape, a.shape());
        let ib = broadcast_index(&shape, b.shape());
        let (av, bv) = (a.values(), b.values());
        let v = ia.iter().zip(&ib).map(|(&i, &j)| f(av[i], bv[j])).collect();
        self.record(op, &[a, b], shape, v)
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (n, k) = require_rank2(OpKind::MatMul, a).map_err(|_| shape_err(OpKind::MatMul, a.shape(), b.shape()))?;
        let (k2, m) = require_rank2(OpKind::MatMul, b).map_err(|_| shape_err(OpKind::MatMul, a.shape(), b.shape()))?;
        if k != k2 {
            return Err(shape_err(OpKind::MatMul, a.shape(), b.shape()));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(&mut out, a.values(), b.values(), n, k, m);
        self.record(Op::MatMul, &[a, b], vec![n, m], out)
    }

    /// Elementwise sum of identically shaped tensors.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.same_shape(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.same_shape(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.same_shape(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.same_shape(Op::Div, a, b, |x, y| x / y)
    }

    /// Sum with same-rank broadcasting of unit extents (e.g. `[n, m] + [1, m]`).
    pub fn broadcast_add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.broadcast(Op::BroadcastAdd, a, b, |x, y| x + y)
    }

    /// Product with same-rank broadcasting of unit extents (e.g. `[n, m] * [n, 1]`).
    pub fn broadcast_mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.broadcast(Op::BroadcastMul, a, b, |x, y| x * y)
    }

    pub fn scalar_mul(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(Op::ScalarMul(c), x, |a| c * a)
    }

    pub fn add_scalar(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(Op::AddScalar, x, |a| a + c)
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(Op::Relu, x, |a| a.max(0.0))
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(Op::Sigmoid, x, |a| {
            if a >= 0.0 {
                1.0 / (1.0 + (-a).exp())
            } else {
                let e = a.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn exp(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(Op::Exp, x, f64::exp)
    }

    pub fn log(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(Op::Log, x, f64::ln)
    }

    pub fn abs(&mut self, x: &Tensor) -> Result<Tensor> {
        self.unary(Op::Abs, x, f64::abs)
    }

    /// `x^e` elementwise; meant for nonnegative bases.
    pub fn powf(&mut self, x: &Tensor, e: f64) -> Result<Tensor> {
        self.unary(Op::Powf(e), x, |a| a.powf(e))
    }

    /// Smooth-L1 (Huber) penalty applied elementwise:
    /// `0.5 x^2 / beta` when `|x| < beta`, else `|x| - 0.5 beta`.
    pub fn huber(&mut self, x: &Tensor, beta: f64) -> Result<Tensor> {
        self.unary(Op::Huber(beta), x, |a| huber(a, beta))
    }

    /// `max(x, floor)` elementwise.
    pub fn clamp_min(&mut self, x: &Tensor, floor: f64) -> Result<Tensor> {
        self.unary(Op::ClampMin(floor), x, |a| a.max(floor))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: &Tensor) -> Result<Tensor> {
        let w = self.last_axis(OpKind::Softmax, x)?;
        let v = softmax_rows(x.values(), w);
        self.record(Op::Softmax, &[x], x.shape().to_vec(), v)
    }

    /// Log-softmax over the last axis, via a stable log-sum-exp.
    pub fn log_softmax(&mut self, x: &Tensor) -> Result<Tensor> {
        let w = self.last_axis(OpKind::LogSoftmax, x)?;
        let v = log_softmax_rows(x.values(), w);
        self.record(Op::LogSoftmax, &[x], x.shape().to_vec(), v)
    }

    fn last_axis(&self, op: OpKind, x: &Tensor) -> Result<usize> {
        match x.shape().last() {
            Some(&w) if w > 0 => Ok(w),
            _ => Err(Error::EmptyAxis { op: op.name() }),
        }
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let s = x.values().iter().sum();
        self.record(Op::Sum, &[x], Vec::new(), vec![s])
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.is_empty() {
            return Err(Error::EmptyAxis { op: OpKind::Mean.name() });
        }
        let s = x.values().iter().sum::<f64>() / x.len() as f64;
        self.record(Op::Mean, &[x], Vec::new(), vec![s])
    }

    /// Sums the last axis, keeping it with extent 1.
    pub fn sum_last_axis(&mut self, x: &Tensor) -> Result<Tensor> {
        let w = self.last_axis(OpKind::SumLastAxis, x)?;
        let v = x.values().chunks(w).map(|r| r.iter().sum()).collect();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank checked") = 1;
        self.record(Op::SumLastAxis, &[x], shape, v)
    }

    /// `[n, m] -> [1, m]`, the mean over rows.
    pub fn mean_first_axis(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, m) = require_rank2(OpKind::MeanFirstAxis, x)?;
        if n == 0 {
            return Err(Error::EmptyAxis { op: OpKind::MeanFirstAxis.name() });
        }
        let mut v = vec![0.0; m];
        for row in x.values().chunks(m) {
            for (a, &b) in v.iter_mut().zip(row) {
                *a += b;
            }
        }
        for a in v.iter_mut() {
            *a /= n as f64;
        }
        self.record(Op::MeanFirstAxis, &[x], vec![1, m], v)
    }

    /// Joins rank-2 tensors with equal row counts along the last axis.
    pub fn concat(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::EmptyAxis { op: OpKind::Concat.name() })?;
        let (n, _) = require_rank2(OpKind::Concat, first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = require_rank2(OpKind::Concat, p)?;
            if r != n {
                return Err(shape_err(OpKind::Concat, first.shape(), p.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut v = Vec::with_capacity(n * total);
        for i in 0..n {
            for (p, &w) in parts.iter().zip(&widths) {
                v.extend_from_slice(&p.values()[i * w..(i + 1) * w]);
            }
        }
        self.record(Op::Concat, parts, vec![n, total], v)
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn columns(&mut self, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let (n, m) = require_rank2(OpKind::Columns, x)?;
        if start >= end || end > m {
            return Err(shape_err(OpKind::Columns, x.shape(), &[start, end]));
        }
        let v = x.values().chunks(m).flat_map(|r| r[start..end].iter().copied()).collect();
        self.record(Op::Columns(start, end), &[x], vec![n, end - start], v)
    }

    /// `[n, k] -> [n, 1]`, selecting column `index[i]` from row `i`.
    pub fn pick(&mut self, x: &Tensor, index: &[usize]) -> Result<Tensor> {
        let (n, k) = require_rank2(OpKind::Pick, x)?;
        if index.len() != n {
            return Err(shape_err(OpKind::Pick, x.shape(), &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&j| j >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let v = index.iter().enumerate().map(|(i, &j)| x.values()[i * k + j]).collect();
        self.record(Op::Pick(Arc::new(index.to_vec())), &[x], vec![n, 1], v)
    }

    /// Reverse replay from a scalar root.
    ///
    /// Every recorded tensor receives a buffer (zeros when unreachable);
    /// contributions from multiple uses accumulate additively.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        if root.len() != 1 {
            return Err(Error::NonScalarRoot(root.shape().to_vec()));
        }
        let root_index = match root.node() {
            Some(n) if n.tape == self.id && n.index < self.nodes.len() => Some(n.index),
            Some(_) => return Err(Error::StaleTensor),
            None => None,
        };
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if let Some(r) = root_index {
            grads[r] = Some(vec![1.0]);
            for i in (0..=r).rev() {
                let Some(g) = grads[i].take() else { continue };
                let node = &self.nodes[i];
                let mut contribs = self.input_grads(node, &g);
                if self.fault == Some(node.op.kind()) {
                    for c in contribs.iter_mut().flatten() {
                        c.iter_mut().for_each(|v| *v = -*v);
                    }
                }
                for (operand, contrib) in node.inputs.iter().zip(contribs) {
                    let (Some(j), Some(c)) = (operand.index, contrib) else { continue };
                    match &mut grads[j] {
                        Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(c),
                    }
                }
                grads[i] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.unwrap_or_else(|| vec![0.0; n.value.len()]))
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }

    fn input_grads(&self, node: &Node, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let ins = &node.inputs;
        let y = &node.value;
        let wants = |k: usize| ins[k].index.is_some();
        let map_x = |f: &dyn Fn(f64, f64) -> f64| -> Vec<Option<Vec<f64>>> {
            vec![Some(ins[0].values.iter().zip(g).map(|(&x, &gi)| f(x, gi)).collect())]
        };
        match &node.op {
            Op::Variable => Vec::new(),
            Op::MatMul => {
                let (n, k) = (ins[0].shape[0], ins[0].shape[1]);
                let m = ins[1].shape[1];
                let da = wants(0).then(|| {
                    let bt = transpose(&ins[1].values, k, m);
                    let mut out = vec![0.0; n * k];
                    matmul_into(&mut out, g, &bt, n, m, k);
                    out
                });
                let db = wants(1).then(|| {
                    let at = transpose(&ins[0].values, n, k);
                    let mut out = vec![0.0; k * m];
                    matmul_into(&mut out, &at, g, k, n, m);
                    out
                });
                vec![da, db]
            }
            Op::Add => vec![wants(0).then(|| g.to_vec()), wants(1).then(|| g.to_vec())],
            Op::Sub => vec![
                wants(0).then(|| g.to_vec()),
                wants(1).then(|| g.iter().map(|v| -v).collect()),
            ],
            Op::Mul => {
                let (a, b) = (&ins[0].values, &ins[1].values);
                vec![
                    wants(0).then(|| g.iter().zip(b.iter()).map(|(gi, bi)| gi * bi).collect()),
                    wants(1).then(|| g.iter().zip(a.iter()).map(|(gi, ai)| gi * ai).collect()),
                ]
            }
            Op::Div => {
                let (a, b) = (&ins[0].values, &ins[1].values);
                vec![
                    wants(0).then(|| g.iter().zip(b.iter()).map(|(gi, bi)| gi / bi).collect()),
                    wants(1).then(|| {
                        g.iter()
                            .zip(a.iter().zip(b.iter()))
                            .map(|(gi, (ai, bi))| -gi * ai / (bi * bi))
                            .collect()
                    }),
                ]
            }
            Op::BroadcastAdd | Op::BroadcastMul => {
                let mul = matches!(node.op, Op::BroadcastMul);
                let ia = broadcast_index(&node.shape, &ins[0].shape);
                let ib = broadcast_index(&node.shape, &ins[1].shape);
                let (a, b) = (&ins[0].values, &ins[1].values);
                let da = wants(0).then(|| {
                    let mut out = vec![0.0; a.len()];
                    for (e, (&i, &j)) in ia.iter().zip(&ib).enumerate() {
                        out[i] += if mul { g[e] * b[j] } else { g[e] };
                    }
                    out
                });
                let db = wants(1).then(|| {
                    let mut out = vec![0.0; b.len()];
                    for (e, (&i, &j)) in ia.iter().zip(&ib).enumerate() {
                        out[j] += if mul { g[e] * a[i] } else { g[e] };
                    }
                    out
                });
                vec![da, db]
            }
            Op::ScalarMul(c) => vec![Some(g.iter().map(|v| c * v).collect())],
            Op::AddScalar => vec![Some(g.to_vec())],
            Op::Relu => map_x(&|x, gi| if x > 0.0 { gi } else { 0.0 }),
            Op::Sigmoid => vec![Some(y.iter().zip(g).map(|(s, gi)| gi * s * (1.0 - s)).collect())],
            Op::Exp => vec![Some(y.iter().zip(g).map(|(e, gi)| gi * e).collect())],
            Op::Log => map_x(&|x, gi| gi / x),
            Op::Abs => map_x(&|x, gi| {
                if x > 0.0 {
                    gi
                } else if x < 0.0 {
                    -gi
                } else {
                    0.0
                }
            }),
            Op::Powf(e) => {
                let e = *e;
                map_x(&|x, gi| if e == 0.0 { 0.0 } else { gi * e * x.powf(e - 1.0) })
            }
            Op::Huber(beta) => {
                let beta = *beta;
                map_x(&|x, gi| if x.abs() < beta { gi * x / beta } else { gi * x.signum() })
            }
            Op::ClampMin(floor) => {
                let floor = *floor;
                map_x(&|x, gi| if x > floor { gi } else { 0.0 })
            }
            Op::Softmax => {
                let w = *node.shape.last().expect("nonempty");
                let mut out = vec![0.0; y.len()];
                for ((yr, gr), or) in y.chunks(w).zip(g.chunks(w)).zip(out.chunks_mut(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in or.iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - dot);
                    }
                }
                vec![Some(out)]
            }
            Op::LogSoftmax => {
                let w = *node.shape.last().expect("nonempty");
                let mut out = vec![0.0; y.len()];
                for ((yr, gr), or) in y.chunks(w).zip(g.chunks(w)).zip(out.chunks_mut(w)) {
                    let total: f64 = gr.iter().sum();
                    for ((o, &ly), &gi) in or.iter_mut().zip(yr).zip(gr) {
                        *o = gi - ly.exp() * total;
                    }
                }
                vec![Some(out)]
            }
            Op::Sum => vec![Some(vec![g[0]; ins[0].values.len()])],
            Op::Mean => {
                let n = ins[0].values.len();
                vec![Some(vec![g[0] / n as f64; n])]
            }
            Op::SumLastAxis => {
                let w = *ins[0].shape.last().expect("nonempty");
                vec![Some(g.iter().flat_map(|&gi| std::iter::repeat_n(gi, w)).collect())]
            }
            Op::MeanFirstAxis => {
                let n = ins[0].shape[0];
                let scaled: Vec<f64> = g.iter().map(|gi| gi / n as f64).collect();
                vec![Some(scaled.repeat(n))]
            }
            Op::Concat => {
                let n = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                ins.iter()
                    .map(|inp| {
                        let w = inp.shape[1];
                        let part = inp.index.is_some().then(|| {
                            (0..n)
                                .flat_map(|i| g[i * total + offset..i * total + offset + w].iter().copied())
                                .collect()
                        });
                        offset += w;
                        part
                    })
                    .collect()
            }
            Op::Columns(start, end) => {
                let m = ins[0].shape[1];
                let w = end - start;
                let mut out = vec![0.0; ins[0].values.len()];
                for (i, gr) in g.chunks(w).enumerate() {
                    out[i * m + start..i * m + end].copy_from_slice(gr);
                }
                vec![Some(out)]
            }
            Op::Pick(index) => {
                let k = ins[0].shape[1];
                let mut out = vec![0.0; ins[0].values.len()];
                for (i, &j) in index.iter().enumerate() {
                    out[i * k + j] = g[i];
                }
                vec![Some(out)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn relu_at_sign_boundaries() {
        let mut tape = Tape::new();
        let y = tape.relu(&t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(y.values(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let y = tape.softmax(&t(&[3], &[0.0, 0.0, 0.0])).unwrap();
        for v in y.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_of_ones_sums_inner_extent() {
        let mut tape = Tape::new();
        let a = Tensor::full(vec![2, 3], 1.0);
        let b = Tensor::full(vec![3, 1], 1.0);
        let c = tape.matmul(&a, &b).unwrap();
        // direct summation: each output is a sum of three products 1*1
        let expected: Vec<f64> = (0..2).map(|_| (0..3).map(|_| 1.0 * 1.0).sum()).collect();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.values(), expected.as_slice());
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut tape = Tape::new();
        let err = tape
            .add(&Tensor::zeros(vec![2, 3]), &Tensor::zeros(vec![3, 2]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
        let err = tape
            .matmul(&Tensor::zeros(vec![2, 3]), &Tensor::zeros(vec![2, 3]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_over_empty_axis_rejected() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.softmax(&Tensor::zeros(vec![2, 0])),
            Err(Error::EmptyAxis { .. })
        ));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let y = tape.mul(&x, &x).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros(vec![2]));
        assert!(matches!(tape.backward(&x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn equal_routing_gives_equal_node_gradients() {
        let mut tape = Tape::new();
        let cl = tape.variable(t(&[2, 2], &[0.3, -1.0, 2.0, 0.5]));
        let cr = tape.variable(t(&[2, 2], &[1.0, 4.0, -2.0, 0.0]));
        let a = tape.scalar_mul(&cl, 0.5).unwrap();
        let b = tape.scalar_mul(&cr, 0.5).unwrap();
        let c = tape.add(&a, &b).unwrap();
        let root = tape.mean(&c).unwrap();
        let g = tape.backward(&root).unwrap();
        assert_eq!(g.get(&cl).unwrap(), g.get(&cr).unwrap());
    }

    #[test]
    fn unreachable_variables_get_zero_buffers() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(1.0));
        let unused = tape.variable(Tensor::zeros(vec![2, 3]));
        let y = tape.scalar_mul(&x, 2.0).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.get(&unused).unwrap(), &[0.0; 6]);
    }

    #[test]
    fn detached_parameter_gets_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.variable(Tensor::scalar(2.0));
        let wd = w.detach();
        let y = tape.mul(&wd, &wd).unwrap();
        assert!(!y.requires_grad());
        let z = tape.add(&y, &w).unwrap();
        let g = tape.backward(&z).unwrap();
        // only the direct path counts
        assert_eq!(g.get(&w).unwrap(), &[1.0]);
    }

    #[test]
    fn cleared_tape_rejects_old_tensors() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(1.0));
        tape.clear();
        assert!(matches!(tape.relu(&x), Err(Error::StaleTensor)));
        let mut other = Tape::new();
        let y = other.variable(Tensor::scalar(1.0));
        assert!(matches!(tape.relu(&y), Err(Error::StaleTensor)));
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut tape = Tape::new();
        let y = tape.relu(&Tensor::full(vec![4], -1.0)).unwrap();
        assert!(!y.requires_grad());
        assert!(tape.is_empty());
    }

    #[test]
    fn broadcast_mul_column_and_row() {
        let mut tape = Tape::new();
        let m = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let col = t(&[2, 1], &[10.0, 100.0]);
        let row = t(&[1, 3], &[1.0, 0.0, -1.0]);
        let a = tape.broadcast_mul(&m, &col).unwrap();
        assert_eq!(a.values(), &[10.0, 20.0, 30.0, 400.0, 500.0, 600.0]);
        let b = tape.broadcast_mul(&row, &m).unwrap();
        assert_eq!(b.values(), &[1.0, 0.0, -3.0, 4.0, 0.0, -6.0]);
        assert!(tape.broadcast_mul(&m, &t(&[3, 1], &[0.0; 3])).is_err());
    }

    #[test]
    fn pick_rejects_out_of_range_index() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(vec![2, 3]);
        assert!(matches!(tape.pick(&x, &[0, 3]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn injected_fault_flips_gradient_sign() {
        let mut tape = Tape::new();
        tape.inject_fault(OpKind::Huber);
        let x = tape.variable(Tensor::scalar(0.5));
        let y = tape.huber(&x, 1.0).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[-0.5]);
    }
}
