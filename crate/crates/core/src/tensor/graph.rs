//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as a node holding its forward value
//! and the information its backward rule needs. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and a
//! backward pass is a single reverse sweep. Gradients of a tensor used more
//! than once are summed.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Tanh,
    Relu,
    Neg,
    Sigmoid,
    Softplus,
    Sqrt,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Right-hand side of a binary elementwise op.
#[derive(Debug, Clone, Copy)]
pub enum Operand {
    Var(Var),
    Scalar(f64),
}

impl From<Var> for Operand {
    fn from(v: Var) -> Self {
        Operand::Var(v)
    }
}

impl From<f64> for Operand {
    fn from(s: f64) -> Self {
        Operand::Scalar(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Softmax,
    LogSoftmax,
    LogSumExp,
}

/// Which axis of a matrix a broadcast vector runs along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Along {
    /// vector of length `n` added to / multiplied into every row of `[m, n]`
    Rows,
    /// vector of length `m` applied to every column of `[m, n]`
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    BinaryScalar {
        op: Binary,
        a: Var,
        s: f64,
        scalar_left: bool,
    },
    ClampMin(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Broadcast {
        op: Binary,
        a: Var,
        v: Var,
        along: Along,
    },
    Reduce {
        kind: Reduction,
        a: Var,
        axis: Option<usize>,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        a: Var,
        idx: Vec<usize>,
    },
    EmbeddingRows {
        table: Var,
        ids: Vec<usize>,
    },
    Conv2d {
        input: Var,
        kernels: Var,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        input: Var,
        k: usize,
    },
    GradReverse(Var, f64),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss wrt `v`, or `None` if `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `v`'s value (zeros when absent).
    pub fn tensor(&self, graph: &Graph, v: Var) -> Tensor {
        let shape = graph.value(v).shape().to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

/// Recording tape of tensor operations.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if k == 0 || stride == 0 || k > padded {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

// C[m×n] = A[m×k] · B[k×n]
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

// C[m×k] += G[m×n] · B[k×n]ᵀ
fn matmul_nt_acc(c: &mut [f64], g: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * k + p] += s;
        }
    }
}

// C[k×n] += A[m×k]ᵀ · G[m×n]
fn matmul_tn_acc(c: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
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
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf; gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let ng = t.requires_grad();
        self.push(t, Op::Leaf, ng)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn unary(&mut self, op: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = match op {
            Unary::Exp => x.map(f64::exp),
            Unary::Log => {
                if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Domain(format!("log of non-positive value {bad}")));
                }
                x.map(f64::ln)
            }
            Unary::Tanh => x.map(f64::tanh),
            Unary::Relu => x.map(|v| v.max(0.0)),
            Unary::Neg => x.map(|v| -v),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Softplus => x.map(softplus),
            Unary::Sqrt => {
                if let Some(bad) = x.data().iter().find(|&&v| v < 0.0) {
                    return Err(Error::Domain(format!("sqrt of negative value {bad}")));
                }
                x.map(f64::sqrt)
            }
            Unary::Square => x.map(|v| v * v),
        };
        let ng = self.ng(a);
        Ok(self.push(out, Op::Unary(op, a), ng))
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: impl Into<Operand>) -> Result<Var> {
        match b.into() {
            Operand::Scalar(s) => self.binary_scalar(op, a, s, false),
            Operand::Var(b) => {
                let (xa, xb) = (self.value(a), self.value(b));
                let (na, nb) = (xa.numel(), xb.numel());
                let shape = if xa.shape() == xb.shape() || nb == 1 {
                    xa.shape().to_vec()
                } else if na == 1 {
                    xb.shape().to_vec()
                } else {
                    return Err(Error::shape(format!(
                        "{op:?}: shapes {:?} and {:?} are not broadcastable",
                        xa.shape(),
                        xb.shape()
                    )));
                };
                let n = na.max(nb);
                let (da, db) = (xa.data(), xb.data());
                let get_a = |i: usize| if na == 1 { da[0] } else { da[i] };
                let get_b = |i: usize| if nb == 1 { db[0] } else { db[i] };
                if op == Binary::Div {
                    if let Some(i) = (0..n).find(|&i| get_b(i) == 0.0) {
                        return Err(Error::Domain(format!("division by zero at index {i}")));
                    }
                }
                let data: Vec<f64> = (0..n)
                    .map(|i| {
                        let (x, y) = (get_a(i), get_b(i));
                        match op {
                            Binary::Add => x + y,
                            Binary::Sub => x - y,
                            Binary::Mul => x * y,
                            Binary::Div => x / y,
                        }
                    })
                    .collect();
                let ng = self.ng(a) || self.ng(b);
                let out = Tensor::new(shape, data)?;
                Ok(self.push(out, Op::Binary(op, a, b), ng))
            }
        }
    }

    /// `a op s`, or `s op a` when `scalar_left`.
    pub fn binary_scalar(&mut self, op: Binary, a: Var, s: f64, scalar_left: bool) -> Result<Var> {
        let x = self.value(a);
        if op == Binary::Div {
            if !scalar_left && s == 0.0 {
                return Err(Error::Domain("division by zero scalar".into()));
            }
            if scalar_left && x.data().iter().any(|&v| v == 0.0) {
                return Err(Error::Domain("division by zero".into()));
            }
        }
        let out = x.map(|v| {
            let (l, r) = if scalar_left { (s, v) } else { (v, s) };
            match op {
                Binary::Add => l + r,
                Binary::Sub => l - r,
                Binary::Mul => l * r,
                Binary::Div => l / r,
            }
        });
        let ng = self.ng(a);
        Ok(self.push(
            out,
            Op::BinaryScalar {
                op,
                a,
                s,
                scalar_left,
            },
            ng,
        ))
    }

    pub fn add(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.binary_scalar(Binary::Mul, a, s, false)
            .expect("scaling never fails")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a).expect("exp is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a).expect("tanh is total")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a).expect("relu is total")
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a).expect("neg is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a).expect("softplus is total")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a).expect("square is total")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    /// Elementwise `max(a, min)`; the gradient passes only where `a > min`.
    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        let out = self.value(a).map(|v| v.max(min));
        let ng = self.ng(a);
        self.push(out, Op::ClampMin(a, min), ng)
    }

    /// Gradient reversal: identity forward, gradient scaled by `-lambda` backward.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Result<Var> {
        if !(lambda > 0.0) {
            return Err(Error::Usage(format!(
                "gradient reversal needs lambda > 0, got {lambda}"
            )));
        }
        let out = self.value(a).clone();
        let ng = self.ng(a);
        Ok(self.push(out, Op::GradReverse(a, lambda), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        if xa.rank() != 2 || xb.rank() != 2 || xa.shape()[1] != xb.shape()[0] {
            return Err(Error::shape(format!(
                "matmul of {:?} and {:?}",
                xa.shape(),
                xb.shape()
            )));
        }
        let (m, k, n) = (xa.shape()[0], xa.shape()[1], xb.shape()[1]);
        let data = matmul_nn(xa.data(), xb.data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::shape(format!(
                "transpose of rank-{} tensor",
                x.rank()
            )));
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let d = x.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = d[i * n + j];
            }
        }
        let ng = self.ng(a);
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    /// Applies vector `v` to every row (or column) of matrix `a` with `op`
    /// (`Add` or `Mul`).
    pub fn broadcast(&mut self, op: Binary, a: Var, v: Var, along: Along) -> Result<Var> {
        if !matches!(op, Binary::Add | Binary::Mul) {
            return Err(Error::Usage(format!(
                "broadcast supports Add and Mul, not {op:?}"
            )));
        }
        let (xa, xv) = (self.value(a), self.value(v));
        if xa.rank() != 2 {
            return Err(Error::shape(format!(
                "broadcast target {:?} is not a matrix",
                xa.shape()
            )));
        }
        let (m, n) = (xa.shape()[0], xa.shape()[1]);
        let want = if along == Along::Rows { n } else { m };
        if xv.numel() != want {
            return Err(Error::shape(format!(
                "broadcast vector of {} values onto {:?} {:?}",
                xv.numel(),
                xa.shape(),
                along
            )));
        }
        let (da, dv) = (xa.data(), xv.data());
        let mut data = da.to_vec();
        for i in 0..m {
            for j in 0..n {
                let b = if along == Along::Rows { dv[j] } else { dv[i] };
                let c = &mut data[i * n + j];
                if op == Binary::Add {
                    *c += b;
                } else {
                    *c *= b;
                }
            }
        }
        let ng = self.ng(a) || self.ng(v);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::Broadcast { op, a, v, along }, ng))
    }

    /// `sum`/`mean` over `axis` (all elements when `None`), or
    /// `softmax`/`log-softmax`/`logsumexp` along `axis` (required).
    ///
    /// Sum, mean and logsumexp drop the reduced axis; the softmax family
    /// keeps the input shape. Logsumexp is stabilized by max-subtraction.
    pub fn reduce(&mut self, kind: Reduction, a: Var, axis: Option<usize>) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let d = x.data();
        let out = match (kind, axis) {
            (Reduction::Sum | Reduction::Mean, None) => {
                let s: f64 = d.iter().sum();
                let s = if kind == Reduction::Mean {
                    s / d.len().max(1) as f64
                } else {
                    s
                };
                Tensor::scalar(s)
            }
            (_, None) => {
                return Err(Error::shape(format!("{kind:?} needs an axis")));
            }
            (_, Some(ax)) if ax >= shape.len() => {
                return Err(Error::shape(format!(
                    "axis {ax} out of range for shape {shape:?}"
                )));
            }
            (_, Some(ax)) => {
                let (outer, len, inner) = split_axis(&shape, ax);
                let mut reduced_shape = shape.clone();
                reduced_shape.remove(ax);
                match kind {
                    Reduction::Sum | Reduction::Mean | Reduction::LogSumExp => {
                        let mut data = vec![0.0; outer * inner];
                        for o in 0..outer {
                            for j in 0..inner {
                                let at = |i: usize| d[(o * len + i) * inner + j];
                                data[o * inner + j] = match kind {
                                    Reduction::LogSumExp => {
                                        let mx = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                                        mx + (0..len).map(|i| (at(i) - mx).exp()).sum::<f64>().ln()
                                    }
                                    Reduction::Mean => (0..len).map(at).sum::<f64>() / len as f64,
                                    _ => (0..len).map(at).sum::<f64>(),
                                };
                            }
                        }
                        Tensor::new(reduced_shape, data)?
                    }
                    Reduction::Softmax | Reduction::LogSoftmax => {
                        let mut data = vec![0.0; d.len()];
                        for o in 0..outer {
                            for j in 0..inner {
                                let idx = |i: usize| (o * len + i) * inner + j;
                                let mx = (0..len)
                                    .map(|i| d[idx(i)])
                                    .fold(f64::NEG_INFINITY, f64::max);
                                let z: f64 = (0..len).map(|i| (d[idx(i)] - mx).exp()).sum();
                                for i in 0..len {
                                    data[idx(i)] = if kind == Reduction::Softmax {
                                        (d[idx(i)] - mx).exp() / z
                                    } else {
                                        d[idx(i)] - mx - z.ln()
                                    };
                                }
                            }
                        }
                        Tensor::new(shape, data)?
                    }
                }
            }
        };
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reduce { kind, a, axis }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(Reduction::Sum, a, None).expect("full sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(Reduction::Mean, a, None).expect("full mean")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduction::Softmax, a, Some(axis))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduction::LogSoftmax, a, Some(axis))
    }

    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduction::LogSumExp, a, Some(axis))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!(
                "concat axis {axis} for shape {base:?}"
            )));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let same_rank = s.len() == base.len();
            if !same_rank
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Error::shape(format!(
                    "concat of {base:?} with {s:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let x = self.value(*p);
                let len = x.shape()[axis];
                data.extend_from_slice(&x.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|p| self.ng(*p));
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{} on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let d = x.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&d[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.ng(a);
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::Slice { a, axis, start }, ng))
    }

    /// Picks flat elements of `a` into a vector.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.numel()) {
            return Err(Error::shape(format!(
                "gather index {bad} out of {}",
                x.numel()
            )));
        }
        let data = idx.iter().map(|&i| x.data()[i]).collect();
        let ng = self.ng(a);
        let out = Tensor::vector(data);
        Ok(self.push(
            out,
            Op::Gather {
                a,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Rows of a `[vocab, dim]` table, one per id, as `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let x = self.value(table);
        if x.rank() != 2 {
            return Err(Error::shape("embedding table must be a matrix"));
        }
        let (v, dim) = (x.shape()[0], x.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= v {
                return Err(Error::shape(format!(
                    "embedding id {id} out of vocabulary {v}"
                )));
            }
            data.extend_from_slice(&x.data()[id * dim..(id + 1) * dim]);
        }
        let ng = self.ng(table);
        let out = Tensor::new(vec![ids.len(), dim], data)?;
        Ok(self.push(
            out,
            Op::EmbeddingRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// 2-D cross-correlation of `[c_in, h, w]` with `[c_out, c_in, k, k]`.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, pad: usize) -> Result<Var> {
        let (x, kt) = (self.value(input), self.value(kernels));
        if x.rank() != 3
            || kt.rank() != 4
            || kt.shape()[1] != x.shape()[0]
            || kt.shape()[2] != kt.shape()[3]
        {
            return Err(Error::shape(format!(
                "conv2d of input {:?} with kernels {:?}",
                x.shape(),
                kt.shape()
            )));
        }
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, k) = (kt.shape()[0], kt.shape()[2]);
        let (oh, ow) = match (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d kernel {k} stride {stride} pad {pad} leaves no output on {h}x{w}"
                )))
            }
        };
        let rows = c_in * k * k;
        let npos = oh * ow;
        let mut cols = vec![0.0; rows * npos];
        let d = x.data();
        for ci in 0..c_in {
            for ki in 0..k {
                for kj in 0..k {
                    let r = (ci * k + ki) * k + kj;
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[r * npos + oy * ow + ox] =
                                d[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
        let data = matmul_nn(kt.data(), &cols, c_out, rows, npos);
        let ng = self.ng(input) || self.ng(kernels);
        let out = Tensor::new(vec![c_out, oh, ow], data)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernels,
                stride,
                pad,
                cols,
            },
            ng,
        ))
    }

    fn pool_dims(&self, input: Var, k: usize) -> Result<(usize, usize, usize, usize, usize)> {
        let x = self.value(input);
        if x.rank() != 3 || k == 0 || x.shape()[1] < k || x.shape()[2] < k {
            return Err(Error::shape(format!("{k}x{k} pooling of {:?}", x.shape())));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        Ok((c, h, w, h / k, w / k))
    }

    /// Non-overlapping `k×k` max pooling of `[c, h, w]`.
    pub fn max_pool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        let (c, h, w, oh, ow) = self.pool_dims(input, k)?;
        let d = self.value(input).data();
        let mut data = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = usize::MAX;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = (ch * h + oy * k + dy) * w + ox * k + dx;
                            if best == usize::MAX || d[i] > d[best] {
                                best = i;
                            }
                        }
                    }
                    data.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let ng = self.ng(input);
        let out = Tensor::new(vec![c, oh, ow], data)?;
        Ok(self.push(out, Op::MaxPool2d { input, argmax }, ng))
    }

    /// Non-overlapping `k×k` average pooling of `[c, h, w]`.
    pub fn avg_pool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        let (c, h, w, oh, ow) = self.pool_dims(input, k)?;
        let d = self.value(input).data();
        let mut data = Vec::with_capacity(c * oh * ow);
        let norm = (k * k) as f64;
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += d[(ch * h + oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    data.push(s / norm);
                }
            }
        }
        let ng = self.ng(input);
        let out = Tensor::new(vec![c, oh, ow], data)?;
        Ok(self.push(out, Op::AvgPool2d { input, k }, ng))
    }

    /// Full backward sweep from the single-element node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_until(loss, None)
    }

    /// Backward sweep that stops before processing `stop` and every node
    /// recorded earlier. The gradient *at* `stop` is complete; nodes before
    /// it receive nothing. Used when only a gradient wrt an intermediate
    /// node is wanted.
    pub fn backward_to(&self, loss: Var, stop: Var) -> Result<Gradients> {
        self.backward_until(loss, Some(stop))
    }

    fn backward_until(&self, loss: Var, stop: Option<Var>) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let floor = stop.map_or(0, |s| s.0 + 1);
        for i in (floor..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let nodes = &self.nodes;
        // Gradient buffer for `v`, allocated on first touch; `None` if `v`
        // does not need a gradient.
        fn slot<'a>(
            nodes: &[Node],
            grads: &'a mut [Option<Vec<f64>>],
            v: Var,
        ) -> Option<&'a mut Vec<f64>> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            let n = nodes[v.0].value.numel();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
        }
        let val = |v: Var| nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::Unary(op, a) => {
                let x = val(*a);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for k in 0..g.len() {
                        ga[k] += g[k]
                            * match op {
                                Unary::Exp => y[k],
                                Unary::Log => 1.0 / x[k],
                                Unary::Tanh => 1.0 - y[k] * y[k],
                                Unary::Relu => {
                                    if x[k] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Neg => -1.0,
                                Unary::Sigmoid => y[k] * (1.0 - y[k]),
                                Unary::Softplus => sigmoid(x[k]),
                                Unary::Sqrt => {
                                    if y[k] > 0.0 {
                                        0.5 / y[k]
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Square => 2.0 * x[k],
                            };
                    }
                }
            }
            Op::Binary(op, a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let (na, nb) = (xa.len(), xb.len());
                let n = g.len();
                let at = |x: &[f64], len: usize, k: usize| if len == 1 { x[0] } else { x[k] };
                let da: Vec<f64> = (0..n)
                    .map(|k| match op {
                        Binary::Add | Binary::Sub => g[k],
                        Binary::Mul => g[k] * at(xb, nb, k),
                        Binary::Div => g[k] / at(xb, nb, k),
                    })
                    .collect();
                let db: Vec<f64> = (0..n)
                    .map(|k| match op {
                        Binary::Add => g[k],
                        Binary::Sub => -g[k],
                        Binary::Mul => g[k] * at(xa, na, k),
                        Binary::Div => {
                            let bv = at(xb, nb, k);
                            -g[k] * at(xa, na, k) / (bv * bv)
                        }
                    })
                    .collect();
                if let Some(ga) = slot(nodes, grads, *a) {
                    if na == 1 && n != 1 {
                        ga[0] += da.iter().sum::<f64>();
                    } else {
                        ga.iter_mut().zip(&da).for_each(|(s, v)| *s += v);
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    if nb == 1 && n != 1 {
                        gb[0] += db.iter().sum::<f64>();
                    } else {
                        gb.iter_mut().zip(&db).for_each(|(s, v)| *s += v);
                    }
                }
            }
            Op::BinaryScalar {
                op,
                a,
                s,
                scalar_left,
            } => {
                let x = val(*a);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for k in 0..g.len() {
                        ga[k] += match (op, scalar_left) {
                            (Binary::Add, _) => g[k],
                            (Binary::Sub, false) => g[k],
                            (Binary::Sub, true) => -g[k],
                            (Binary::Mul, _) => g[k] * s,
                            (Binary::Div, false) => g[k] / s,
                            (Binary::Div, true) => -g[k] * s / (x[k] * x[k]),
                        };
                    }
                }
            }
            Op::ClampMin(a, min) => {
                let x = val(*a);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for k in 0..g.len() {
                        if x[k] > *min {
                            ga[k] += g[k];
                        }
                    }
                }
            }
            Op::GradReverse(a, lambda) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for k in 0..g.len() {
                        ga[k] += -lambda * g[k];
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if nodes[a.0].needs_grad {
                    let xb = val(*b);
                    let ga = slot(nodes, grads, *a).expect("needs grad");
                    matmul_nt_acc(ga, g, xb, m, n, k);
                }
                if nodes[b.0].needs_grad {
                    let xa = val(*a);
                    let gb = slot(nodes, grads, *b).expect("needs grad");
                    matmul_tn_acc(gb, xa, g, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let (n, m) = (s[0], s[1]);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Broadcast { op, a, v, along } => {
                let s = node.value.shape();
                let (m, n) = (s[0], s[1]);
                let (xa, xv) = (val(*a), val(*v));
                let vi = |i: usize, j: usize| if *along == Along::Rows { j } else { i };
                if nodes[a.0].needs_grad {
                    let ga = slot(nodes, grads, *a).expect("needs grad");
                    for i in 0..m {
                        for j in 0..n {
                            let k = i * n + j;
                            ga[k] += if *op == Binary::Add {
                                g[k]
                            } else {
                                g[k] * xv[vi(i, j)]
                            };
                        }
                    }
                }
                if nodes[v.0].needs_grad {
                    let gv = slot(nodes, grads, *v).expect("needs grad");
                    for i in 0..m {
                        for j in 0..n {
                            let k = i * n + j;
                            gv[vi(i, j)] += if *op == Binary::Add {
                                g[k]
                            } else {
                                g[k] * xa[k]
                            };
                        }
                    }
                }
            }
            Op::Reduce { kind, a, axis } => {
                let x = val(*a);
                let shape = nodes[a.0].value.shape();
                let Some(ga) = slot(nodes, grads, *a) else {
                    return;
                };
                match axis {
                    None => {
                        let scale = if *kind == Reduction::Mean {
                            1.0 / x.len().max(1) as f64
                        } else {
                            1.0
                        };
                        ga.iter_mut().for_each(|s| *s += g[0] * scale);
                    }
                    Some(ax) => {
                        let (outer, len, inner) = split_axis(shape, *ax);
                        for o in 0..outer {
                            for j in 0..inner {
                                let idx = |i: usize| (o * len + i) * inner + j;
                                match kind {
                                    Reduction::Sum | Reduction::Mean => {
                                        let gv = g[o * inner + j]
                                            / if *kind == Reduction::Mean {
                                                len as f64
                                            } else {
                                                1.0
                                            };
                                        (0..len).for_each(|i| ga[idx(i)] += gv);
                                    }
                                    Reduction::LogSumExp => {
                                        let lse = y[o * inner + j];
                                        let gv = g[o * inner + j];
                                        (0..len).for_each(|i| {
                                            ga[idx(i)] += gv * (x[idx(i)] - lse).exp()
                                        });
                                    }
                                    Reduction::Softmax => {
                                        let dot: f64 =
                                            (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                                        (0..len).for_each(|i| {
                                            ga[idx(i)] += y[idx(i)] * (g[idx(i)] - dot)
                                        });
                                    }
                                    Reduction::LogSoftmax => {
                                        let gs: f64 = (0..len).map(|i| g[idx(i)]).sum();
                                        (0..len).for_each(|i| {
                                            ga[idx(i)] += g[idx(i)] - y[idx(i)].exp() * gs
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(s, v)| *s += v);
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.shape()[*axis];
                    if let Some(gp) = slot(nodes, grads, *p) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for t in 0..len * inner {
                                gp[dst + t] += g[src + t];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let full_shape = nodes[a.0].value.shape();
                let (outer, full, inner) = split_axis(full_shape, *axis);
                let len = node.value.shape()[*axis];
                if let Some(ga) = slot(nodes, grads, *a) {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for t in 0..len * inner {
                            ga[dst + t] += g[src + t];
                        }
                    }
                }
            }
            Op::Gather { a, idx } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (k, &i) in idx.iter().enumerate() {
                        ga[i] += g[k];
                    }
                }
            }
            Op::EmbeddingRows { table, ids } => {
                let dim = nodes[table.0].value.shape()[1];
                if let Some(gt) = slot(nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..dim {
                            gt[id * dim + c] += g[r * dim + c];
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernels,
                stride,
                pad,
                cols,
            } => {
                let (c_in, h, w) = {
                    let s = nodes[input.0].value.shape();
                    (s[0], s[1], s[2])
                };
                let (c_out, k) = {
                    let s = nodes[kernels.0].value.shape();
                    (s[0], s[2])
                };
                let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
                let rows = c_in * k * k;
                let npos = oh * ow;
                if nodes[kernels.0].needs_grad {
                    let gk = slot(nodes, grads, *kernels).expect("needs grad");
                    matmul_nt_acc(gk, g, cols, c_out, npos, rows);
                }
                if nodes[input.0].needs_grad {
                    let kt = val(*kernels);
                    let mut gcols = vec![0.0; rows * npos];
                    matmul_tn_acc(&mut gcols, kt, g, c_out, rows, npos);
                    let gi = slot(nodes, grads, *input).expect("needs grad");
                    for ci in 0..c_in {
                        for ki in 0..k {
                            for kj in 0..k {
                                let r = (ci * k + ki) * k + kj;
                                for oy in 0..oh {
                                    let iy = (oy * stride + ki) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for ox in 0..ow {
                                        let ix = (ox * stride + kj) as isize - *pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        gi[(ci * h + iy as usize) * w + ix as usize] +=
                                            gcols[r * npos + oy * ow + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if let Some(gi) = slot(nodes, grads, *input) {
                    for (k, &src) in argmax.iter().enumerate() {
                        gi[src] += g[k];
                    }
                }
            }
            Op::AvgPool2d { input, k } => {
                let s = nodes[input.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / k, w / k);
                let norm = (k * k) as f64;
                if let Some(gi) = slot(nodes, grads, *input) {
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(ch * oh + oy) * ow + ox] / norm;
                                for dy in 0..*k {
                                    for dx in 0..*k {
                                        gi[(ch * h + oy * k + dy) * w + ox * k + dx] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
