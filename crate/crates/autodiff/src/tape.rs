//! Append-only computation tape and its reverse pass.
//!
//! Every operation evaluates eagerly, stores its output on the tape and
//! records which nodes it read. `backward` walks the tape in exact reverse
//! insertion order, so the topological order is the insertion order.

use crate::error::{AutodiffError, Result};
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Constant multiplier applied to gradients flowing backward through a gate.
///
/// The factor is a snapshot taken when the gate is inserted; nothing flows
/// back into it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateFactor(f64);

impl GateFactor {
    pub const IDENTITY: GateFactor = GateFactor(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value < 0.0 {
            return Err(AutodiffError::Contract(format!(
                "gate factor must be finite and non-negative, got {value}"
            )));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Tanh(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Scale(NodeId, f64),
    Shift(NodeId),
    MinConst(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Gather { input: NodeId, indices: Vec<usize> },
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ReduceMin { input: NodeId, arg: usize },
    ReduceMax { input: NodeId, arg: usize },
    SmoothL1(NodeId, NodeId),
    Gate(NodeId, GateFactor),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Tanh(_) => "tanh",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Scale(..) => "scale",
            Op::Shift(_) => "shift",
            Op::MinConst(..) => "min_const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
            Op::SoftmaxRows(_) => "softmax",
            Op::LogSoftmaxRows(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ReduceMin { .. } => "reduce_min",
            Op::ReduceMax { .. } => "reduce_max",
            Op::SmoothL1(..) => "smooth_l1",
            Op::Gate(..) => "grad_gate",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    param: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a reverse pass: one gradient per node that received one.
///
/// Every parameter node has an entry, zero-filled when the loss does not
/// depend on it.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn trim_leading_ones(s: &[usize]) -> &[usize] {
    let k = s.iter().take_while(|&&d| d == 1).count();
    &s[k..]
}

/// Output shape when the smaller operand repeats cyclically over the larger.
///
/// Allowed: equal shapes, a one-element operand, or an operand whose shape
/// (ignoring leading unit dimensions) is a suffix of the other's.
fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb || b.numel() == 1 || sa.ends_with(trim_leading_ones(sb)) {
        Ok(sa.to_vec())
    } else if a.numel() == 1 || sb.ends_with(trim_leading_ones(sa)) {
        Ok(sb.to_vec())
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn item(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        self.nodes[id.0].param
    }

    /// Ids of all parameter leaves, in insertion order.
    pub fn params(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].param)
            .map(NodeId)
            .collect()
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            param: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
            param: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
            param: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(name, va, vb)?;
        let n: usize = shape.iter().product();
        let (da, db) = (va.data(), vb.data());
        let (na, nb) = (da.len(), db.len());
        let data = (0..n).map(|i| f(da[i % na], db[i % nb])).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(op, value, &[a, b]))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let value = self.nodes[x.0].value.map(f);
        self.push(op, value, &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    /// `x * factor` for a constant factor.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    /// `x + offset` for a constant offset.
    pub fn shift(&mut self, x: NodeId, offset: f64) -> NodeId {
        self.unary(x, |v| v + offset, Op::Shift(x))
    }

    /// Elementwise `min(x, cap)`. The gradient reaches `x` wherever `x <= cap`.
    pub fn min_const(&mut self, x: NodeId, cap: f64) -> NodeId {
        self.unary(x, |v| v.min(cap), Op::MinConst(x, cap))
    }

    /// Elementwise `max(x, floor)`, composed as `-min(-x, -floor)`.
    pub fn max_const(&mut self, x: NodeId, floor: f64) -> NodeId {
        let n = self.neg(x);
        let m = self.min_const(n, -floor);
        self.neg(m)
    }

    /// Logistic sigmoid composed as `exp(-softplus(-x))`.
    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let n = self.neg(x);
        let sp = self.softplus(n);
        let nsp = self.neg(sp);
        self.exp(nsp)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), value, &[a, b]))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let (r, c) = match v.shape() {
            [r, c] => (*r, *c),
            s => {
                return Err(AutodiffError::Contract(format!(
                    "transpose expects a matrix, got shape {s:?}"
                )))
            }
        };
        let d = v.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(Op::Transpose(x), value, &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != v.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = v.with_shape(shape.to_vec());
        Ok(self.push(Op::Reshape(x), value, &[x]))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| AutodiffError::Contract("concat of zero tensors".into()))?;
        let base = self.nodes[first.0].value.shape().to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::Contract(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut total_axis = 0;
        for id in inputs {
            let s = self.nodes[id.0].value.shape();
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total_axis += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for id in inputs {
                let v = &self.nodes[id.0].value;
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
            inputs,
        ))
    }

    /// Flat gather: `out[j] = x.flat[indices[j]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: NodeId, indices: &[usize], shape: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != indices.len() {
            return Err(AutodiffError::Contract(format!(
                "gather of {} indices into shape {shape:?}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.numel()) {
            return Err(AutodiffError::Contract(format!(
                "gather index {bad} out of range for {} elements",
                v.numel()
            )));
        }
        let data = indices.iter().map(|&i| v.data()[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(
            Op::Gather {
                input: x,
                indices: indices.to_vec(),
            },
            value,
            &[x],
        ))
    }

    /// Single element of a tensor as a one-element node.
    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        self.gather(x, &[index], &[1])
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let (rows, cols) = v.as_matrix_dims();
        let mut out = vec![0.0; v.numel()];
        for r in 0..rows {
            softmax_row(
                &v.data()[r * cols..(r + 1) * cols],
                &mut out[r * cols..(r + 1) * cols],
            );
        }
        let value = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.push(Op::SoftmaxRows(x), value, &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let (rows, cols) = v.as_matrix_dims();
        let mut out = vec![0.0; v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            for (o, &z) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = z - lse;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.push(Op::LogSoftmaxRows(x), value, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].value.data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::Mean(x), Tensor::scalar(m), &[x])
    }

    /// Minimum element; the gradient goes to the first minimizer.
    pub fn reduce_min(&mut self, x: NodeId) -> NodeId {
        let d = self.nodes[x.0].value.data();
        let mut arg = 0;
        for (i, &v) in d.iter().enumerate() {
            if v < d[arg] {
                arg = i;
            }
        }
        let value = Tensor::scalar(d[arg]);
        self.push(Op::ReduceMin { input: x, arg }, value, &[x])
    }

    /// Maximum element; the gradient goes to the first maximizer.
    pub fn reduce_max(&mut self, x: NodeId) -> NodeId {
        let d = self.nodes[x.0].value.data();
        let mut arg = 0;
        for (i, &v) in d.iter().enumerate() {
            if v > d[arg] {
                arg = i;
            }
        }
        let value = Tensor::scalar(d[arg]);
        self.push(Op::ReduceMax { input: x, arg }, value, &[x])
    }

    /// Mean over elements of `0.5 d^2` where `|d| < 1`, else `|d| - 0.5`, with `d = a - b`.
    pub fn smooth_l1(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "smooth_l1",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let total: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| smooth_l1_value(x - y))
            .sum();
        let value = Tensor::scalar(total / va.numel() as f64);
        Ok(self.push(Op::SmoothL1(a, b), value, &[a, b]))
    }

    /// Identity in the forward pass; scales the incoming gradient by `factor` on the way back.
    pub fn grad_gate(&mut self, x: NodeId, factor: GateFactor) -> NodeId {
        let value = self.nodes[x.0].value.clone();
        self.push(Op::Gate(x, factor), value, &[x])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(AutodiffError::Contract(format!(
                "backward requires a scalar loss, node {} has shape {:?}",
                loss.0,
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.value.all_finite() {
                return Err(AutodiffError::NonFiniteValue {
                    node: idx,
                    op: node.op.name(),
                });
            }
            if node.requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.param && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Gradient for a broadcast operand of `shape`, given per-output-element partials.
    fn reduce_broadcast(&self, id: NodeId, n_out: usize, partial: impl Fn(usize) -> f64) -> Tensor {
        let v = &self.nodes[id.0].value;
        let mut out = Tensor::zeros(v.shape());
        let n = out.numel();
        let d = out.data_mut();
        for i in 0..n_out {
            d[i % n] += partial(i);
        }
        out
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let gd = g.data();
        let unary = |x: NodeId, f: &dyn Fn(usize) -> f64| -> Tensor {
            let v = &self.nodes[x.0].value;
            let data = (0..v.numel()).map(f).collect();
            Tensor::new(v.shape().to_vec(), data).expect("same shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let da = self.nodes[a.0].value.data();
                let db = self.nodes[b.0].value.data();
                let (na, nb) = (da.len(), db.len());
                let n = gd.len();
                let (pa, pb): (Box<dyn Fn(usize) -> f64>, Box<dyn Fn(usize) -> f64>) =
                    match &node.op {
                        Op::Add(..) => (Box::new(|i| gd[i]), Box::new(|i| gd[i])),
                        Op::Sub(..) => (Box::new(|i| gd[i]), Box::new(|i| -gd[i])),
                        Op::Mul(..) => (
                            Box::new(|i| gd[i] * db[i % nb]),
                            Box::new(|i| gd[i] * da[i % na]),
                        ),
                        _ => (
                            Box::new(|i| gd[i] / db[i % nb]),
                            Box::new(|i| {
                                let bv = db[i % nb];
                                -gd[i] * da[i % na] / (bv * bv)
                            }),
                        ),
                    };
                if self.nodes[a.0].requires_grad {
                    let ga = self.reduce_broadcast(a, n, pa);
                    self.accumulate(grads, a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = self.reduce_broadcast(b, n, pb);
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Neg(x) => self.accumulate(grads, *x, g.scaled(-1.0)),
            Op::Exp(x) => {
                let gx = unary(*x, &|i| gd[i] * y[i]);
                self.accumulate(grads, *x, gx);
            }
            Op::Log(x) => {
                let xv = self.nodes[x.0].value.data();
                let gx = unary(*x, &|i| gd[i] / xv[i]);
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.data();
                let gx = unary(*x, &|i| if xv[i] > 0.0 { gd[i] } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::Softplus(x) => {
                let xv = self.nodes[x.0].value.data();
                let gx = unary(*x, &|i| gd[i] * sigmoid(xv[i]));
                self.accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = unary(*x, &|i| gd[i] * (1.0 - y[i] * y[i]));
                self.accumulate(grads, *x, gx);
            }
            Op::Abs(x) => {
                let xv = self.nodes[x.0].value.data();
                let gx = unary(*x, &|i| {
                    if xv[i] > 0.0 {
                        gd[i]
                    } else if xv[i] < 0.0 {
                        -gd[i]
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Square(x) => {
                let xv = self.nodes[x.0].value.data();
                let gx = unary(*x, &|i| 2.0 * xv[i] * gd[i]);
                self.accumulate(grads, *x, gx);
            }
            Op::Sqrt(x) => {
                let gx = unary(*x, &|i| gd[i] / (2.0 * y[i]));
                self.accumulate(grads, *x, gx);
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.scaled(*c)),
            Op::Shift(x) => self.accumulate(grads, *x, g.clone()),
            Op::MinConst(x, cap) => {
                let xv = self.nodes[x.0].value.data();
                let gx = unary(*x, &|i| if xv[i] <= *cap { gd[i] } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let mut ga = Tensor::zeros(va.shape());
                    matmul_bt_into(gd, vb.data(), ga.data_mut(), m, k, n);
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = Tensor::zeros(vb.shape());
                    matmul_at_into(va.data(), gd, gb.data_mut(), m, k, n);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (r, c) = (s[0], s[1]);
                let xs = self.nodes[x.0].value.shape().to_vec();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = gd[i * c + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, out).expect("same size"));
            }
            Op::Reshape(x) => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                self.accumulate(grads, *x, g.with_shape(xs));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for id in inputs {
                    let v = &self.nodes[id.0].value;
                    let chunk = v.shape()[*axis] * inner;
                    if self.nodes[id.0].requires_grad {
                        let mut out = Vec::with_capacity(v.numel());
                        for o in 0..outer {
                            let start = o * row + offset;
                            out.extend_from_slice(&gd[start..start + chunk]);
                        }
                        let gx = Tensor::new(v.shape().to_vec(), out).expect("same size");
                        self.accumulate(grads, *id, gx);
                    }
                    offset += chunk;
                }
            }
            Op::Gather { input, indices } => {
                let mut gx = Tensor::zeros(self.nodes[input.0].value.shape());
                let d = gx.data_mut();
                for (j, &i) in indices.iter().enumerate() {
                    d[i] += gd[j];
                }
                self.accumulate(grads, *input, gx);
            }
            Op::SoftmaxRows(x) => {
                let (rows, cols) = node.value.as_matrix_dims();
                let mut out = vec![0.0; y.len()];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let dot: f64 = gd[span.clone()]
                        .iter()
                        .zip(&y[span.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for i in span {
                        out[i] = y[i] * (gd[i] - dot);
                    }
                }
                let gx = Tensor::new(node.value.shape().to_vec(), out).expect("same shape");
                self.accumulate(grads, *x, gx);
            }
            Op::LogSoftmaxRows(x) => {
                let (rows, cols) = node.value.as_matrix_dims();
                let mut out = vec![0.0; y.len()];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let gsum: f64 = gd[span.clone()].iter().sum();
                    for i in span {
                        out[i] = gd[i] - y[i].exp() * gsum;
                    }
                }
                let gx = Tensor::new(node.value.shape().to_vec(), out).expect("same shape");
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let gx = Tensor::full(self.nodes[x.0].value.shape(), gd[0]);
                self.accumulate(grads, *x, gx);
            }
            Op::Mean(x) => {
                let v = &self.nodes[x.0].value;
                let gx = Tensor::full(v.shape(), gd[0] / v.numel() as f64);
                self.accumulate(grads, *x, gx);
            }
            Op::ReduceMin { input, arg } | Op::ReduceMax { input, arg } => {
                let mut gx = Tensor::zeros(self.nodes[input.0].value.shape());
                gx.data_mut()[*arg] = gd[0];
                self.accumulate(grads, *input, gx);
            }
            Op::SmoothL1(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let n = va.numel() as f64;
                let partial: Vec<f64> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(x, y)| gd[0] * smooth_l1_slope(x - y) / n)
                    .collect();
                if self.nodes[a.0].requires_grad {
                    let ga = Tensor::new(va.shape().to_vec(), partial.clone()).expect("same shape");
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = Tensor::new(vb.shape().to_vec(), partial.iter().map(|p| -p).collect())
                        .expect("same shape");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Gate(x, factor) => self.accumulate(grads, *x, g.scaled(factor.value())),
        }
    }
}

/// Per-element SmoothL1 with unit margin.
pub fn smooth_l1_value(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Derivative of [`smooth_l1_value`].
pub fn smooth_l1_slope(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}
