//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every forward computation is recorded as a [`Node`] holding its op, its
//! input ids and its cached value. Inputs always precede the node that uses
//! them, so the tape is a DAG in topological order and [`Tape::backward`] is a
//! single reverse sweep.
//!
//! Besides the usual arithmetic the tape knows two ops specific to
//! model-based first-order policy gradients:
//!
//! * [`Tape::grad_swap`] forwards an externally supplied value (the simulator's
//!   next state) while routing the whole incoming adjoint to another node (the
//!   learned model's prediction). The external value never sees a gradient.
//! * [`Tape::reparam_sample`] / [`Tape::gaussian_nll`] for Gaussian policies
//!   and Gaussian dynamics models.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a node on a [`Tape`]. Ids are dense and increase with recording
/// order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `½·log(2π)`, the per-dimension constant of a Gaussian log-density.
pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// `log(2π)`.
pub const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Flat discriminant of [`Op`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Constant,
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddBias,
    BroadcastRows,
    MatMul,
    Sum,
    SumLast,
    Mean,
    Neg,
    Exp,
    Log,
    Tanh,
    Elu,
    Silu,
    Softplus,
    Square,
    Sin,
    Cos,
    Scale,
    Offset,
    Clamp,
    Minimum,
    Concat,
    Slice,
    Reshape,
    ReparamSample,
    GaussianNll,
    GradSwap,
}

/// A recorded operation together with its inputs and op-specific constants.
#[derive(Clone, Debug)]
pub enum Op {
    /// A value with no gradient history.
    Constant,
    /// A differentiable parameter.
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// `x[.., k] + b[k]`, bias broadcast over leading axes.
    AddBias(NodeId, NodeId),
    /// Repeat a rank-1 `[k]` tensor into `[rows, k]`.
    BroadcastRows(NodeId, usize),
    /// Matrix product; rank-1 operands act as a row (left) or column (right).
    MatMul(NodeId, NodeId),
    Sum(NodeId),
    /// Sum over the last axis.
    SumLast(NodeId),
    Mean(NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Elu(NodeId),
    Silu(NodeId),
    Softplus(NodeId),
    Square(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Clamp(NodeId, f64, f64),
    Minimum(NodeId, NodeId),
    /// Concatenate along the last axis.
    Concat(Vec<NodeId>),
    /// Half-open range `[start, end)` of the last axis.
    Slice(NodeId, usize, usize),
    Reshape(NodeId),
    /// `mean + exp(log_std) * noise`; the noise is a constant.
    ReparamSample { mean: NodeId, log_std: NodeId, noise: Tensor },
    /// Summed diagonal Gaussian negative log-likelihood.
    GaussianNll { mean: NodeId, log_std: NodeId, target: NodeId },
    /// Forward value supplied externally; adjoint routed to `predicted`.
    GradSwap { predicted: NodeId },
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Constant => OpKind::Constant,
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::AddBias(..) => OpKind::AddBias,
            Op::BroadcastRows(..) => OpKind::BroadcastRows,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Sum(..) => OpKind::Sum,
            Op::SumLast(..) => OpKind::SumLast,
            Op::Mean(..) => OpKind::Mean,
            Op::Neg(..) => OpKind::Neg,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Elu(..) => OpKind::Elu,
            Op::Silu(..) => OpKind::Silu,
            Op::Softplus(..) => OpKind::Softplus,
            Op::Square(..) => OpKind::Square,
            Op::Sin(..) => OpKind::Sin,
            Op::Cos(..) => OpKind::Cos,
            Op::Scale(..) => OpKind::Scale,
            Op::Offset(..) => OpKind::Offset,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Minimum(..) => OpKind::Minimum,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice(..) => OpKind::Slice,
            Op::Reshape(..) => OpKind::Reshape,
            Op::ReparamSample { .. } => OpKind::ReparamSample,
            Op::GaussianNll { .. } => OpKind::GaussianNll,
            Op::GradSwap { .. } => OpKind::GradSwap,
        }
    }

    /// Ids of the nodes this op reads.
    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Constant | Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddBias(a, b)
            | Op::MatMul(a, b)
            | Op::Minimum(a, b) => vec![*a, *b],
            Op::BroadcastRows(a, _)
            | Op::Sum(a)
            | Op::SumLast(a)
            | Op::Mean(a)
            | Op::Neg(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Elu(a)
            | Op::Silu(a)
            | Op::Softplus(a)
            | Op::Square(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Clamp(a, ..)
            | Op::Slice(a, ..)
            | Op::Reshape(a) => vec![*a],
            Op::Concat(xs) => xs.clone(),
            Op::ReparamSample { mean, log_std, .. } => vec![*mean, *log_std],
            Op::GaussianNll { mean, log_std, target } => vec![*mean, *log_std, *target],
            Op::GradSwap { predicted } => vec![*predicted],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
}

/// Append-only record of a forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_ids: Vec<NodeId>,
}

/// Adjoints produced by [`Tape::backward`]. Nodes the root does not depend on
/// have an implicit zero adjoint.
#[derive(Clone, Debug)]
pub struct GradientMap {
    adjoints: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adjoints.get(id.0).and_then(|a| a.as_ref())
    }

    /// Adjoint of `id`, or zeros of `shape` when it was never touched.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.adjoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjoints.is_empty()
    }
}

const PAR_MATMUL_MIN_WORK: usize = 1 << 16;

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, &[a.shape(), b.shape()]));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// `[m, k] x [k, n]` dimensions for a matmul, with rank-1 operands promoted.
fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, Vec<usize>)> {
    match (a.len(), b.len()) {
        (2, 2) if a[1] == b[0] => Some((a[0], a[1], b[1], vec![a[0], b[1]])),
        (2, 1) if a[1] == b[0] => Some((a[0], a[1], 1, vec![a[0]])),
        (1, 2) if a[0] == b[0] => Some((1, a[0], b[1], vec![b[1]])),
        _ => None,
    }
}

/// `c[m, n] = a[m, k] * b[k, n]`, rows in parallel for large products.
fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let row = |(i, ci): (usize, &mut [f64])| {
        let ai = &a[i * k..(i + 1) * k];
        for (p, &aip) in ai.iter().enumerate() {
            let bp = &b[p * n..(p + 1) * n];
            for (cij, &bpj) in ci.iter_mut().zip(bp) {
                *cij += aip * bpj;
            }
        }
    };
    if m * k * n >= PAR_MATMUL_MIN_WORK && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// `da[m, k] = dc[m, n] * b[k, n]^T`.
fn matmul_grad_a(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut da = vec![0.0; m * k];
    let row = |(i, dai): (usize, &mut [f64])| {
        let dci = &dc[i * n..(i + 1) * n];
        for (p, d) in dai.iter_mut().enumerate() {
            let bp = &b[p * n..(p + 1) * n];
            *d = dci.iter().zip(bp).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_MATMUL_MIN_WORK && m > 1 {
        da.par_chunks_mut(k).enumerate().for_each(row);
    } else {
        da.chunks_mut(k).enumerate().for_each(row);
    }
    da
}

/// `db[k, n] = a[m, k]^T * dc[m, n]`.
fn matmul_grad_b(dc: &[f64], a: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut db = vec![0.0; k * n];
    let row = |(p, dbp): (usize, &mut [f64])| {
        for i in 0..m {
            let aip = a[i * k + p];
            let dci = &dc[i * n..(i + 1) * n];
            for (d, &g) in dbp.iter_mut().zip(dci) {
                *d += aip * g;
            }
        }
    };
    if m * k * n >= PAR_MATMUL_MIN_WORK && k > 1 {
        db.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        db.chunks_mut(n).enumerate().for_each(row);
    }
    db
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

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn leaf_ids(&self) -> &[NodeId] {
        &self.leaf_ids
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        if matches!(op, Op::Leaf) {
            self.leaf_ids.push(id);
        }
        self.nodes.push(Node { op, value });
        id
    }

    /// A value with no gradient history.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    /// A differentiable parameter.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Evaluates `op`'s forward rule on its inputs and appends the result.
    ///
    /// `Constant`, `Leaf` and `GradSwap` carry externally supplied values and
    /// must be recorded through [`Tape::constant`], [`Tape::leaf`] and
    /// [`Tape::grad_swap`].
    pub fn record(&mut self, op: Op) -> Result<NodeId> {
        for input in op.inputs() {
            if input.0 >= self.nodes.len() {
                return Err(Error::UnknownNode(input.0));
            }
        }
        let value = self.forward(&op)?;
        Ok(self.push(op, value))
    }

    fn forward(&self, op: &Op) -> Result<Tensor> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let out = match op {
            Op::Constant | Op::Leaf | Op::GradSwap { .. } => {
                return Err(Error::InvalidArgument(format!(
                    "{:?} nodes carry external values and cannot be recorded generically",
                    op.kind()
                )))
            }
            Op::Add(a, b) => {
                check_same("add", v(a), v(b))?;
                v(a).zip_map(v(b), |x, y| x + y)
            }
            Op::Sub(a, b) => {
                check_same("sub", v(a), v(b))?;
                v(a).zip_map(v(b), |x, y| x - y)
            }
            Op::Mul(a, b) => {
                check_same("mul", v(a), v(b))?;
                v(a).zip_map(v(b), |x, y| x * y)
            }
            Op::Div(a, b) => {
                check_same("div", v(a), v(b))?;
                v(a).zip_map(v(b), |x, y| x / y)
            }
            Op::AddBias(x, b) => {
                let (x, b) = (v(x), v(b));
                if b.shape().len() != 1 || b.shape()[0] != x.last_dim() {
                    return Err(Error::shape("add_bias", &[x.shape(), b.shape()]));
                }
                let k = x.last_dim();
                let data = x
                    .data()
                    .chunks(k)
                    .flat_map(|r| r.iter().zip(b.data()).map(|(p, q)| p + q))
                    .collect();
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            Op::BroadcastRows(x, rows) => {
                let x = v(x);
                if x.shape().len() != 1 || *rows == 0 {
                    return Err(Error::shape("broadcast_rows", &[x.shape(), &[*rows]]));
                }
                let data = (0..*rows).flat_map(|_| x.data().iter().copied()).collect();
                Tensor::from_parts(vec![*rows, x.numel()], data)
            }
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                let (m, k, n, shape) = matmul_dims(a.shape(), b.shape())
                    .ok_or_else(|| Error::shape("matmul", &[a.shape(), b.shape()]))?;
                Tensor::from_parts(shape, matmul_kernel(a.data(), b.data(), m, k, n))
            }
            Op::Sum(x) => Tensor::scalar(v(x).sum()),
            Op::SumLast(x) => {
                let x = v(x);
                let mut shape = x.shape()[..x.shape().len() - 1].to_vec();
                if shape.is_empty() {
                    shape.push(1);
                }
                let data = x.data().chunks(x.last_dim()).map(|r| r.iter().sum()).collect();
                Tensor::from_parts(shape, data)
            }
            Op::Mean(x) => Tensor::scalar(v(x).sum() / v(x).numel() as f64),
            Op::Neg(x) => v(x).map(|t| -t),
            Op::Exp(x) => v(x).map(f64::exp),
            Op::Log(x) => v(x).map(f64::ln),
            Op::Tanh(x) => v(x).map(f64::tanh),
            Op::Elu(x) => v(x).map(elu),
            Op::Silu(x) => v(x).map(|t| t * sigmoid(t)),
            Op::Softplus(x) => v(x).map(softplus),
            Op::Square(x) => v(x).map(|t| t * t),
            Op::Sin(x) => v(x).map(f64::sin),
            Op::Cos(x) => v(x).map(f64::cos),
            Op::Scale(x, c) => v(x).map(|t| t * c),
            Op::Offset(x, c) => v(x).map(|t| t + c),
            Op::Clamp(x, lo, hi) => {
                if lo > hi {
                    return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
                }
                v(x).map(|t| t.clamp(*lo, *hi))
            }
            Op::Minimum(a, b) => {
                check_same("minimum", v(a), v(b))?;
                v(a).zip_map(v(b), f64::min)
            }
            Op::Concat(xs) => {
                let first = xs
                    .first()
                    .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
                let outer = v(first).shape()[..v(first).shape().len() - 1].to_vec();
                let mut width = 0;
                for x in xs {
                    let s = v(x).shape();
                    if s[..s.len() - 1] != outer[..] {
                        let shapes: Vec<&[usize]> = xs.iter().map(|x| v(x).shape()).collect();
                        return Err(Error::shape("concat", &shapes));
                    }
                    width += v(x).last_dim();
                }
                let rows = v(first).outer_len();
                let mut data = Vec::with_capacity(rows * width);
                for r in 0..rows {
                    for x in xs {
                        data.extend_from_slice(v(x).row(r));
                    }
                }
                let mut shape = outer;
                shape.push(width);
                Tensor::from_parts(shape, data)
            }
            Op::Slice(x, start, end) => {
                let x = v(x);
                if start >= end || *end > x.last_dim() {
                    return Err(Error::shape("slice", &[x.shape(), &[*start, *end]]));
                }
                let data = (0..x.outer_len()).flat_map(|r| x.row(r)[*start..*end].iter().copied()).collect();
                let mut shape = x.shape().to_vec();
                *shape.last_mut().unwrap() = end - start;
                Tensor::from_parts(shape, data)
            }
            Op::Reshape(_) => unreachable!("reshape is recorded through Tape::reshape"),
            Op::ReparamSample { mean, log_std, noise } => {
                let (m, s) = (v(mean), v(log_std));
                check_same("reparam_sample", m, s)?;
                check_same("reparam_sample", m, noise)?;
                let data = m
                    .data()
                    .iter()
                    .zip(s.data())
                    .zip(noise.data())
                    .map(|((mu, ls), e)| mu + ls.exp() * e)
                    .collect();
                Tensor::from_parts(m.shape().to_vec(), data)
            }
            Op::GaussianNll { mean, log_std, target } => {
                let (m, s, t) = (v(mean), v(log_std), v(target));
                check_same("gaussian_nll", m, s)?;
                check_same("gaussian_nll", m, t)?;
                let total = m
                    .data()
                    .iter()
                    .zip(s.data())
                    .zip(t.data())
                    .map(|((mu, ls), y)| {
                        let z = (y - mu) / ls.exp();
                        ls + 0.5 * z * z + HALF_LOG_2PI
                    })
                    .sum();
                Tensor::scalar(total)
            }
        };
        Ok(out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Div(a, b))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.record(Op::AddBias(x, bias))
    }

    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        self.record(Op::BroadcastRows(x, rows))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul(a, b))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Sum(x))
    }

    pub fn sum_last(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::SumLast(x))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Mean(x))
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Neg(x))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Log(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Tanh(x))
    }

    pub fn elu(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Elu(x))
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Silu(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Softplus(x))
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Square(x))
    }

    pub fn sin(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Sin(x))
    }

    pub fn cos(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Cos(x))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.record(Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.record(Op::Offset(x, c))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.record(Op::Clamp(x, lo, hi))
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Minimum(a, b))
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.record(Op::Concat(xs.to_vec()))
    }

    pub fn slice(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.record(Op::Slice(x, start, end))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let src = self.value(x);
        if shape.iter().product::<usize>() != src.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", &[src.shape(), &shape]));
        }
        let value = Tensor::from_parts(shape, src.data().to_vec());
        Ok(self.push(Op::Reshape(x), value))
    }

    /// `mean + exp(log_std) * noise`; gradients reach `mean` and `log_std`,
    /// never the noise.
    pub fn reparam_sample(&mut self, mean: NodeId, log_std: NodeId, noise: Tensor) -> Result<NodeId> {
        self.record(Op::ReparamSample { mean, log_std, noise })
    }

    /// `Σ log_std + ½((target − mean)/exp(log_std))² + ½·log 2π`.
    pub fn gaussian_nll(&mut self, mean: NodeId, log_std: NodeId, target: NodeId) -> Result<NodeId> {
        self.record(Op::GaussianNll { mean, log_std, target })
    }

    /// Returns a node whose value is a copy of `real` and whose adjoint is
    /// passed unchanged to `predicted` during backward.
    pub fn grad_swap(&mut self, predicted: NodeId, real: Tensor) -> Result<NodeId> {
        if predicted.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(predicted.0));
        }
        if self.shape(predicted) != real.shape() {
            return Err(Error::shape("grad_swap", &[self.shape(predicted), real.shape()]));
        }
        Ok(self.push(Op::GradSwap { predicted }, real))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: NodeId) -> Result<GradientMap> {
        if root.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(root.0));
        }
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adjoints[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for id in (0..=root.0).rev() {
            let (lower, upper) = adjoints.split_at_mut(id);
            let Some(g) = upper[0].as_ref() else { continue };
            self.propagate(id, g, lower);
        }
        Ok(GradientMap { adjoints })
    }

    fn propagate(&self, id: usize, g: &Tensor, lower: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let v = |n: &NodeId| &self.nodes[n.0].value;
        let mut acc = |target: &NodeId, contrib: Tensor| {
            debug_assert!(target.0 < id);
            match &mut lower[target.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.map(|t| -t));
            }
            Op::Mul(a, b) => {
                acc(a, g.zip_map(v(b), |gi, bi| gi * bi));
                acc(b, g.zip_map(v(a), |gi, ai| gi * ai));
            }
            Op::Div(a, b) => {
                let bv = v(b);
                acc(a, g.zip_map(bv, |gi, bi| gi / bi));
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(bv.data())
                    .map(|((gi, oi), bi)| -gi * oi / bi)
                    .collect();
                acc(b, Tensor::from_parts(bv.shape().to_vec(), data));
            }
            Op::AddBias(x, b) => {
                acc(x, g.clone());
                let k = g.last_dim();
                let mut db = vec![0.0; k];
                for r in g.data().chunks(k) {
                    for (d, gi) in db.iter_mut().zip(r) {
                        *d += gi;
                    }
                }
                acc(b, Tensor::from_parts(vec![k], db));
            }
            Op::BroadcastRows(x, _) => {
                let k = g.last_dim();
                let mut dx = vec![0.0; k];
                for r in g.data().chunks(k) {
                    for (d, gi) in dx.iter_mut().zip(r) {
                        *d += gi;
                    }
                }
                acc(x, Tensor::from_parts(vec![k], dx));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let (m, k, n, _) = matmul_dims(av.shape(), bv.shape()).expect("checked in forward");
                acc(a, Tensor::from_parts(av.shape().to_vec(), matmul_grad_a(g.data(), bv.data(), m, k, n)));
                acc(b, Tensor::from_parts(bv.shape().to_vec(), matmul_grad_b(g.data(), av.data(), m, k, n)));
            }
            Op::Sum(x) => acc(x, Tensor::full(v(x).shape(), g.item())),
            Op::SumLast(x) => {
                let xv = v(x);
                let k = xv.last_dim();
                let data = g.data().iter().flat_map(|&gi| std::iter::repeat_n(gi, k)).collect();
                acc(x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::Mean(x) => {
                let xv = v(x);
                acc(x, Tensor::full(xv.shape(), g.item() / xv.numel() as f64));
            }
            Op::Neg(x) => acc(x, g.map(|t| -t)),
            Op::Exp(x) => acc(x, g.zip_map(out, |gi, oi| gi * oi)),
            Op::Log(x) => acc(x, g.zip_map(v(x), |gi, xi| gi / xi)),
            Op::Tanh(x) => acc(x, g.zip_map(out, |gi, oi| gi * (1.0 - oi * oi))),
            Op::Elu(x) => acc(x, g.zip_map(v(x), |gi, xi| if xi > 0.0 { gi } else { gi * xi.exp() })),
            Op::Silu(x) => acc(
                x,
                g.zip_map(v(x), |gi, xi| {
                    let s = sigmoid(xi);
                    gi * s * (1.0 + xi * (1.0 - s))
                }),
            ),
            Op::Softplus(x) => acc(x, g.zip_map(v(x), |gi, xi| gi * sigmoid(xi))),
            Op::Square(x) => acc(x, g.zip_map(v(x), |gi, xi| 2.0 * gi * xi)),
            Op::Sin(x) => acc(x, g.zip_map(v(x), |gi, xi| gi * xi.cos())),
            Op::Cos(x) => acc(x, g.zip_map(v(x), |gi, xi| -gi * xi.sin())),
            Op::Scale(x, c) => acc(x, g.map(|t| t * c)),
            Op::Offset(x, _) => acc(x, g.clone()),
            Op::Clamp(x, lo, hi) => {
                acc(x, g.zip_map(v(x), |gi, xi| if xi >= *lo && xi <= *hi { gi } else { 0.0 }))
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (v(a), v(b));
                let pick_a: Vec<bool> = av.data().iter().zip(bv.data()).map(|(x, y)| x <= y).collect();
                let da = g.data().iter().zip(&pick_a).map(|(gi, &p)| if p { *gi } else { 0.0 }).collect();
                let db = g.data().iter().zip(&pick_a).map(|(gi, &p)| if p { 0.0 } else { *gi }).collect();
                acc(a, Tensor::from_parts(av.shape().to_vec(), da));
                acc(b, Tensor::from_parts(bv.shape().to_vec(), db));
            }
            Op::Concat(xs) => {
                let rows = g.outer_len();
                let mut offset = 0;
                for x in xs {
                    let xv = v(x);
                    let w = xv.last_dim();
                    let data = (0..rows).flat_map(|r| g.row(r)[offset..offset + w].iter().copied()).collect();
                    acc(x, Tensor::from_parts(xv.shape().to_vec(), data));
                    offset += w;
                }
            }
            Op::Slice(x, start, end) => {
                let xv = v(x);
                let w = xv.last_dim();
                let mut data = vec![0.0; xv.numel()];
                for r in 0..g.outer_len() {
                    data[r * w + start..r * w + end].copy_from_slice(g.row(r));
                }
                acc(x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::Reshape(x) => acc(x, Tensor::from_parts(v(x).shape().to_vec(), g.data().to_vec())),
            Op::ReparamSample { mean, log_std, noise } => {
                acc(mean, g.clone());
                let data = g
                    .data()
                    .iter()
                    .zip(v(log_std).data())
                    .zip(noise.data())
                    .map(|((gi, ls), e)| gi * ls.exp() * e)
                    .collect();
                acc(log_std, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::GaussianNll { mean, log_std, target } => {
                let gs = g.item();
                let (m, s, t) = (v(mean), v(log_std), v(target));
                let n = m.numel();
                let mut dm = Vec::with_capacity(n);
                let mut ds = Vec::with_capacity(n);
                let mut dt = Vec::with_capacity(n);
                for i in 0..n {
                    let sigma = s.data()[i].exp();
                    let z = (t.data()[i] - m.data()[i]) / sigma;
                    dm.push(-gs * z / sigma);
                    dt.push(gs * z / sigma);
                    ds.push(gs * (1.0 - z * z));
                }
                let shape = m.shape().to_vec();
                acc(mean, Tensor::from_parts(shape.clone(), dm));
                acc(log_std, Tensor::from_parts(shape.clone(), ds));
                acc(target, Tensor::from_parts(shape, dt));
            }
            Op::GradSwap { predicted } => acc(predicted, g.clone()),
        }
    }
}
