//! The computation record and the differentiable operations that write to it.
//!
//! Every operation appends one node holding its output value. Nodes are
//! appended in execution order, so reverse index order is a valid
//! topological order for the backward sweep and gradients are accumulated in
//! a fixed sequence.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::{broadcast_shape, for_each_broadcast, Tensor};
use crate::Real;

/// Pointwise functions of one argument.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Exp,
    Relu,
    Log,
    /// `log(sigmoid(x))`, evaluated without forming the sigmoid.
    LogSigmoid,
    Abs,
    Neg,
}

/// Pointwise functions of two arguments, with singleton broadcasting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    /// Elementwise maximum; ties route the gradient to the left operand.
    Max,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
            Unary::Relu => "relu",
            Unary::Log => "log",
            Unary::LogSigmoid => "log_sigmoid",
            Unary::Abs => "abs",
            Unary::Neg => "neg",
        }
    }

    fn eval(self, x: Real) -> Real {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Relu => x.max(0.0),
            Unary::Log => x.ln(),
            Unary::LogSigmoid => x.min(0.0) - (-x.abs()).exp().ln_1p(),
            Unary::Abs => x.abs(),
            Unary::Neg => -x,
        }
    }

    /// Derivative at input `x` with output `y`.
    fn derivative(self, x: Real, y: Real) -> Real {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Log => 1.0 / x,
            Unary::LogSigmoid => sigmoid(-x),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Neg => -1.0,
        }
    }
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Max => "maximum",
        }
    }

    fn eval(self, a: Real, b: Real) -> Real {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
            Binary::Max => {
                if a >= b {
                    a
                } else {
                    b
                }
            }
        }
    }

    /// Partial derivatives with respect to each operand.
    fn partials(self, a: Real, b: Real) -> (Real, Real) {
        match self {
            Binary::Add => (1.0, 1.0),
            Binary::Sub => (1.0, -1.0),
            Binary::Mul => (b, a),
            Binary::Div => (1.0 / b, -a / (b * b)),
            Binary::Max => {
                if a >= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
        }
    }
}

fn transpose(x: &Tensor) -> Tensor {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut data = Vec::with_capacity(x.len());
    for j in 0..c {
        for i in 0..r {
            data.push(x.data()[i * c + j]);
        }
    }
    Tensor::new(vec![c, r], data).expect("transpose preserves length")
}

/// Numerically stable logistic function.
pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Scale(usize, Real),
    AddScalar(usize),
    Clamp { x: usize, lo: Real, hi: Real },
    Sum(usize),
    SumLast(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        normalized: Vec<Real>,
        rstd: Vec<Real>,
    },
    Concat(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceLast { x: usize, start: usize },
    GatherRows { table: usize, index: Vec<usize> },
    GatherCols { x: usize, index: Vec<usize> },
    Outer(usize, usize),
    BatchMatVec(usize, usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations during a forward pass for a later backward sweep.
///
/// A tape is single-threaded and append-only; drop it after the backward
/// pass to release the stored intermediates.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Concatenates along the last dimension. Leading dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].rank() - 1];
        for v in &values[1..] {
            if &v.shape()[..v.rank() - 1] != lead || v.rank() != values[0].rank() {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let rows: usize = lead.iter().product();
        let width: usize = values.iter().map(|v| v.last_dim()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row_slice(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        let ids = parts.iter().map(|p| p.id).collect();
        first.record("concat", Tensor::new(shape, data)?, Op::Concat(ids), parts)
    }

    /// Stacks rank-2 tensors along the first dimension. Widths must agree.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows of zero tensors".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let width = values[0].last_dim();
        let mut rows = 0;
        for v in &values {
            if v.rank() != 2 || v.last_dim() != width {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.shape()[0];
        }
        let mut data = Vec::with_capacity(rows * width);
        for v in &values {
            data.extend_from_slice(v.data());
        }
        let ids = parts.iter().map(|p| p.id).collect();
        first.record(
            "concat_rows",
            Tensor::new(vec![rows, width], data)?,
            Op::ConcatRows(ids),
            parts,
        )
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every leaf created with `requires_grad` receives dLoss/dLeaf; leaves
    /// not connected to the loss receive zeros through [`Gradients::wrt`].
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        let seed = &nodes[loss.id].value;
        if seed.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(seed.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut acc = |target: usize, delta: Tensor| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            let out = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Unary(f, x) => {
                    let xv = &nodes[*x].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .zip(out.data())
                        .map(|((gi, &xi), &yi)| gi * f.derivative(xi, yi))
                        .collect();
                    acc(*x, Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::Binary(f, a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let mut ga = vec![0.0; av.len()];
                    let mut gb = vec![0.0; bv.len()];
                    let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                    for_each_broadcast(out.shape(), av.shape(), bv.shape(), |o, ia, ib| {
                        let (da, db) = f.partials(ad[ia], bd[ib]);
                        ga[ia] += gd[o] * da;
                        gb[ib] += gd[o] * db;
                    });
                    acc(*a, Tensor::new(av.shape().to_vec(), ga)?);
                    acc(*b, Tensor::new(bv.shape().to_vec(), gb)?);
                }
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (m, k, p) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if nodes[*a].requires_grad {
                        let ga = kernels::matmul_grad_lhs(g.data(), bv.data(), m, k, p);
                        acc(*a, Tensor::new(vec![m, k], ga)?);
                    }
                    if nodes[*b].requires_grad {
                        let gb = kernels::matmul_grad_rhs(av.data(), g.data(), m, k, p);
                        acc(*b, Tensor::new(vec![k, p], gb)?);
                    }
                }
                Op::Transpose(x) => acc(*x, transpose(&g)),
                Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
                Op::AddScalar(x) => acc(*x, g),
                Op::Clamp { x, lo, hi } => {
                    let xv = &nodes[*x].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gi, &xi)| if xi >= *lo && xi <= *hi { *gi } else { 0.0 })
                        .collect();
                    acc(*x, Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::Sum(x) => {
                    let xv = &nodes[*x].value;
                    acc(*x, Tensor::full(xv.shape(), g.data()[0]));
                }
                Op::SumLast(x) => {
                    let xv = &nodes[*x].value;
                    let d = xv.last_dim();
                    let data = g
                        .data()
                        .iter()
                        .flat_map(|&gi| std::iter::repeat(gi).take(d))
                        .collect();
                    acc(*x, Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    rstd,
                } => {
                    let xv = &nodes[*x].value;
                    let gv = &nodes[*gain].value;
                    let d = xv.last_dim();
                    let rows = xv.len() / d;
                    let mut gx = vec![0.0; xv.len()];
                    let mut ggain = vec![0.0; d];
                    let mut gbias = vec![0.0; d];
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let xh = &normalized[r * d..(r + 1) * d];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            ggain[j] += gr[j] * xh[j];
                            gbias[j] += gr[j];
                            dxhat[j] = gr[j] * gv.data()[j];
                            mean_dxhat += dxhat[j];
                            mean_dxhat_xhat += dxhat[j] * xh[j];
                        }
                        mean_dxhat /= d as Real;
                        mean_dxhat_xhat /= d as Real;
                        for j in 0..d {
                            gx[r * d + j] =
                                rstd[r] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
                        }
                    }
                    acc(*x, Tensor::new(xv.shape().to_vec(), gx)?);
                    acc(*gain, Tensor::new(gv.shape().to_vec(), ggain)?);
                    let bshape = nodes[*bias].value.shape().to_vec();
                    acc(*bias, Tensor::new(bshape, gbias)?);
                }
                Op::Concat(parts) => {
                    let width = out.last_dim();
                    let rows = out.len() / width;
                    let mut offset = 0;
                    for &p in parts {
                        let pv = &nodes[p].value;
                        let w = pv.last_dim();
                        if nodes[p].requires_grad {
                            let mut data = Vec::with_capacity(pv.len());
                            for r in 0..rows {
                                let start = r * width + offset;
                                data.extend_from_slice(&g.data()[start..start + w]);
                            }
                            acc(p, Tensor::new(pv.shape().to_vec(), data)?);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p].value.len();
                        if nodes[p].requires_grad {
                            let shape = nodes[p].value.shape().to_vec();
                            acc(p, Tensor::new(shape, g.data()[offset..offset + len].to_vec())?);
                        }
                        offset += len;
                    }
                }
                Op::SliceLast { x, start } => {
                    let xv = &nodes[*x].value;
                    let (full, w) = (xv.last_dim(), out.last_dim());
                    let mut data = vec![0.0; xv.len()];
                    for r in 0..out.len() / w {
                        data[r * full + start..r * full + start + w]
                            .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    acc(*x, Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::GatherRows { table, index } => {
                    let tv = &nodes[*table].value;
                    let d = tv.last_dim();
                    let mut data = vec![0.0; tv.len()];
                    for (r, &row) in index.iter().enumerate() {
                        for j in 0..d {
                            data[row * d + j] += g.data()[r * d + j];
                        }
                    }
                    acc(*table, Tensor::new(tv.shape().to_vec(), data)?);
                }
                Op::GatherCols { x, index } => {
                    let xv = &nodes[*x].value;
                    let n = xv.last_dim();
                    let mut data = vec![0.0; xv.len()];
                    for (r, &col) in index.iter().enumerate() {
                        data[r * n + col] = g.data()[r];
                    }
                    acc(*x, Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::Outer(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (d, e) = (av.last_dim(), bv.last_dim());
                    let rows = av.len() / d;
                    let mut ga = vec![0.0; av.len()];
                    let mut gb = vec![0.0; bv.len()];
                    for r in 0..rows {
                        let gr = &g.data()[r * d * e..(r + 1) * d * e];
                        let ar = av.row_slice(r);
                        let br = bv.row_slice(r);
                        for i in 0..d {
                            let gri = &gr[i * e..(i + 1) * e];
                            ga[r * d + i] = gri.iter().zip(br).map(|(x, y)| x * y).sum();
                            for j in 0..e {
                                gb[r * e + j] += gri[j] * ar[i];
                            }
                        }
                    }
                    acc(*a, Tensor::new(av.shape().to_vec(), ga)?);
                    acc(*b, Tensor::new(bv.shape().to_vec(), gb)?);
                }
                Op::BatchMatVec(c, q) => {
                    let cv = &nodes[*c].value;
                    let qv = &nodes[*q].value;
                    let e = qv.last_dim();
                    let d = out.last_dim();
                    let rows = qv.len() / e;
                    let mut gc = vec![0.0; cv.len()];
                    let mut gq = vec![0.0; qv.len()];
                    for r in 0..rows {
                        let cr = cv.row_slice(r);
                        let qr = qv.row_slice(r);
                        for i in 0..d {
                            let gi = g.data()[r * d + i];
                            for j in 0..e {
                                gc[r * d * e + i * e + j] = gi * qr[j];
                                gq[r * e + j] += gi * cr[i * e + j];
                            }
                        }
                    }
                    acc(*c, Tensor::new(cv.shape().to_vec(), gc)?);
                    acc(*q, Tensor::new(qv.shape().to_vec(), gq)?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros shaped like it when none flowed back.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape()),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn check_same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands belong to different tapes"
        );
    }

    /// Appends `value` as the result of `op` over `inputs`, after checking it is finite.
    fn record(
        &self,
        name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var<'t>],
    ) -> Result<Var<'t>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(Var::requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.tape.push(value, op, requires_grad))
    }

    pub fn unary(self, f: Unary) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.map(|v| f.eval(v));
        self.record(f.name(), out, Op::Unary(f, self.id), &[self])
    }

    pub fn binary(self, f: Binary, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let a = self.value();
        let b = other.value();
        let shape = broadcast_shape(f.name(), a.shape(), b.shape())?;
        if f == Binary::Div && b.data().iter().any(|&v| v == 0.0) {
            return Err(TensorError::DivisionByZero { op: "div" });
        }
        let mut data = vec![0.0; shape.iter().product()];
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast(&shape, a.shape(), b.shape(), |o, ia, ib| {
            data[o] = f.eval(ad[ia], bd[ib]);
        });
        let out = Tensor::new(shape, data)?;
        self.record(f.name(), out, Op::Binary(f, self.id, other.id), &[self, other])
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(Unary::Sigmoid)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(Unary::Tanh)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Unary::Exp)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Unary::Relu)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary(Unary::Log)
    }

    pub fn log_sigmoid(self) -> Result<Var<'t>> {
        self.unary(Unary::LogSigmoid)
    }

    pub fn abs(self) -> Result<Var<'t>> {
        self.unary(Unary::Abs)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(Unary::Neg)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Mul, other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Div, other)
    }

    pub fn maximum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Max, other)
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(self, c: Real) -> Result<Var<'t>> {
        let out = self.value().map(|v| v * c);
        self.record("scale", out, Op::Scale(self.id, c), &[self])
    }

    pub fn add_scalar(self, c: Real) -> Result<Var<'t>> {
        let out = self.value().map(|v| v + c);
        self.record("add_scalar", out, Op::AddScalar(self.id), &[self])
    }

    /// Clamps into `[lo, hi]`; clamped elements pass no gradient.
    pub fn clamp(self, lo: Real, hi: Real) -> Result<Var<'t>> {
        let out = self.value().map(|v| v.clamp(lo, hi));
        self.record("clamp", out, Op::Clamp { x: self.id, lo, hi }, &[self])
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let a = self.value();
        let b = other.value();
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = Tensor::new(vec![m, p], kernels::matmul(a.data(), b.data(), m, k, p))?;
        self.record("matmul", out, Op::MatMul(self.id, other.id), &[self, other])
    }

    /// Swaps the two axes of a rank-2 tensor.
    pub fn transpose(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(TensorError::Dimension {
                op: "transpose",
                msg: format!("expected rank 2, got {:?}", x.shape()),
            });
        }
        self.record("transpose", transpose(&x), Op::Transpose(self.id), &[self])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(self) -> Result<Var<'t>> {
        let out = Tensor::scalar(self.value().sum());
        self.record("sum", out, Op::Sum(self.id), &[self])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len();
        if n == 0 {
            return Err(TensorError::Contract("mean of an empty tensor".into()));
        }
        self.sum()?.scale(1.0 / n as Real)
    }

    /// Sums over the last dimension, keeping it as size 1.
    pub fn sum_last(self) -> Result<Var<'t>> {
        let x = self.value();
        let d = x.last_dim();
        if d == 0 {
            return Err(TensorError::Dimension {
                op: "sum_last",
                msg: "last dimension is empty".into(),
            });
        }
        let data = x.data().chunks(d).map(|c| c.iter().sum()).collect();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        self.record("sum_last", Tensor::new(shape, data)?, Op::SumLast(self.id), &[self])
    }

    /// Normalizes each row over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: Real) -> Result<Var<'t>> {
        let x = self.value();
        let gv = gain.value();
        let bv = bias.value();
        let d = x.last_dim();
        if d == 0 || x.is_empty() {
            return Err(TensorError::Dimension {
                op: "layer_norm",
                msg: "normalized dimension is empty".into(),
            });
        }
        if gv.len() != d || bv.len() != d {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Contract("layer_norm eps must be positive".into()));
        }
        let rows = x.len() / d;
        let mut normalized = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = x.row_slice(r);
            let mean = row.iter().sum::<Real>() / d as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let xh = (row[j] - mean) * s;
                normalized[r * d + j] = xh;
                out[r * d + j] = xh * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            normalized,
            rstd,
        };
        self.record("layer_norm", out, op, &[self, gain, bias])
    }

    /// Columns `start..start + len` of the last dimension.
    pub fn slice_last(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let full = x.last_dim();
        if start + len > full {
            return Err(TensorError::Dimension {
                op: "slice_last",
                msg: format!("range {}..{} exceeds width {}", start, start + len, full),
            });
        }
        let rows = x.len() / full.max(1);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.row_slice(r)[start..start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, data)?;
        self.record("slice_last", out, Op::SliceLast { x: self.id, start }, &[self])
    }

    /// Selects rows of a rank-2 table, e.g. an embedding lookup.
    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'t>> {
        let t = self.value();
        if t.rank() != 2 {
            return Err(TensorError::Dimension {
                op: "gather_rows",
                msg: format!("table must be rank 2, got {:?}", t.shape()),
            });
        }
        let d = t.last_dim();
        let mut data = Vec::with_capacity(index.len() * d);
        for &row in index {
            if row >= t.shape()[0] {
                return Err(TensorError::Dimension {
                    op: "gather_rows",
                    msg: format!("row {} out of range for {} rows", row, t.shape()[0]),
                });
            }
            data.extend_from_slice(t.row_slice(row));
        }
        let out = Tensor::new(vec![index.len(), d], data)?;
        let op = Op::GatherRows {
            table: self.id,
            index: index.to_vec(),
        };
        self.record("gather_rows", out, op, &[self])
    }

    /// Picks column `index[r]` from each row `r`, giving an `rows x 1` tensor.
    pub fn gather_cols(self, index: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] != index.len() {
            return Err(TensorError::Dimension {
                op: "gather_cols",
                msg: format!("{} indices for shape {:?}", index.len(), x.shape()),
            });
        }
        let n = x.shape()[1];
        let mut data = Vec::with_capacity(index.len());
        for (r, &c) in index.iter().enumerate() {
            if c >= n {
                return Err(TensorError::Dimension {
                    op: "gather_cols",
                    msg: format!("column {} out of range for {} columns", c, n),
                });
            }
            data.push(x.at(r, c));
        }
        let op = Op::GatherCols {
            x: self.id,
            index: index.to_vec(),
        };
        self.record("gather_cols", Tensor::column(data), op, &[self])
    }

    /// Row-wise outer product: `[B,d] x [B,e] -> [B, d*e]`, entry `i*e + j` is `a_i * b_j`.
    pub fn outer(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let a = self.value();
        let b = other.value();
        if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
            return Err(TensorError::Shape {
                op: "outer",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (rows, d, e) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut data = Vec::with_capacity(rows * d * e);
        for r in 0..rows {
            let br = b.row_slice(r);
            for &ai in a.row_slice(r) {
                data.extend(br.iter().map(|bj| ai * bj));
            }
        }
        let out = Tensor::new(vec![rows, d * e], data)?;
        self.record("outer", out, Op::Outer(self.id, other.id), &[self, other])
    }

    /// Row-wise matrix-vector product: each row of `self` is a flattened
    /// `d x e` matrix, multiplied by the matching row of `q` (`[B,e]`).
    pub fn batch_matvec(self, q: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&q);
        let c = self.value();
        let qv = q.value();
        let e = qv.last_dim();
        if c.rank() != 2
            || qv.rank() != 2
            || c.shape()[0] != qv.shape()[0]
            || e == 0
            || c.shape()[1] % e != 0
        {
            return Err(TensorError::Shape {
                op: "batch_matvec",
                lhs: c.shape().to_vec(),
                rhs: qv.shape().to_vec(),
            });
        }
        let (rows, d) = (c.shape()[0], c.shape()[1] / e);
        let mut data = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let cr = c.row_slice(r);
            let qr = qv.row_slice(r);
            for i in 0..d {
                data.push(cr[i * e..(i + 1) * e].iter().zip(qr).map(|(x, y)| x * y).sum());
            }
        }
        let out = Tensor::new(vec![rows, d], data)?;
        self.record("batch_matvec", out, Op::BatchMatVec(self.id, q.id), &[self, q])
    }
}
