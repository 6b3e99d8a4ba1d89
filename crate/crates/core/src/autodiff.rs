//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its variables. Calling
//! [`Tape::backward`] consumes the tape and returns the gradient of a scalar
//! loss with respect to every leaf created with `requires_grad`.
//!
//! ```
//! use lorentz_vad::autodiff::Tape;
//! use lorentz_vad::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap().with_requires_grad(true));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq, None).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```
//!
//! Binary elementwise ops accept a right operand of the same shape, a
//! single-element scalar, a row vector (`[n]` or `[1, n]`) broadcast over the
//! rows of an `[m, n]` left operand, or a column `[m, 1]` broadcast over its
//! columns. Nothing more general is supported.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound applied to arccosh arguments.
pub const ARCCOSH_FLOOR: f64 = 1.0 + 1e-12;
/// Arguments below `1 - ARCCOSH_SLACK` are rejected rather than clamped.
pub const ARCCOSH_SLACK: f64 = 1e-6;

const GELU_C: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable operation set.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    ScalarMul(f64),
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Transpose,
    Sum {
        axis: Option<usize>,
    },
    Mean {
        axis: Option<usize>,
    },
    Exp,
    Sqrt,
    Sigmoid,
    /// Softmax along the last axis.
    Softmax,
    /// Tanh approximation.
    Gelu,
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Log,
    Arccosh,
    Cosh,
    Sinh,
    /// `sinh(x) / x`, continuous through zero.
    Sinhc,
    SquaredNorm {
        axis: Option<usize>,
    },
    Clamp {
        min: f64,
        max: f64,
    },
    /// Inverted dropout. Identity when the tape is not in training mode.
    Dropout {
        p: f64,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "elementwise-mul",
            Op::Div => "div",
            Op::ScalarMul(_) => "scalar-mul",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose => "transpose",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Exp => "exp",
            Op::Sqrt => "sqrt",
            Op::Sigmoid => "sigmoid",
            Op::Softmax => "softmax",
            Op::Gelu => "gelu",
            Op::Relu => "relu",
            Op::LeakyRelu { .. } => "leaky-relu",
            Op::Log => "log",
            Op::Arccosh => "arccosh",
            Op::Cosh => "cosh",
            Op::Sinh => "sinh",
            Op::Sinhc => "sinhc",
            Op::SquaredNorm { .. } => "squared-norm",
            Op::Clamp { .. } => "clamp",
            Op::Dropout { .. } => "dropout",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::Div => Some(2),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

struct Node {
    value: Tensor,
    op: Option<Op>,
    inputs: Vec<Var>,
    /// Dropout mask, when the op needs one.
    aux: Option<Vec<f64>>,
    needs_grad: bool,
}

/// Records operations for one forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    training: bool,
    rng: Option<ChaCha8Rng>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a leaf that was created with `requires_grad`.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Clone, Copy)]
enum Bcast {
    Same,
    Scalar,
    Row(usize),
    Col(usize),
}

impl Bcast {
    fn resolve(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        if lhs == rhs {
            return Ok(Bcast::Same);
        }
        let rhs_numel: usize = rhs.iter().product();
        if rhs_numel == 1 {
            return Ok(Bcast::Scalar);
        }
        if let [m, n] = *lhs {
            if rhs == [n] || rhs == [1, n] {
                return Ok(Bcast::Row(n));
            }
            if rhs == [m, 1] {
                return Ok(Bcast::Col(n));
            }
        }
        Err(Error::dim(
            op,
            format!("cannot combine shapes {lhs:?} and {rhs:?}"),
        ))
    }

    #[inline]
    fn map(self, k: usize) -> usize {
        match self {
            Bcast::Same => k,
            Bcast::Scalar => 0,
            Bcast::Row(n) => k % n,
            Bcast::Col(n) => k / n,
        }
    }
}

fn shape2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        ref s => Err(Error::dim(
            op,
            format!("expected a matrix, got shape {s:?}"),
        )),
    }
}

/// `a[m,k] * b[k,n]`, accumulating into `out`.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_data(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    let t = (c * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_C * x * x)
}

/// `sinh(x) / x` with a series near zero.
pub(crate) fn sinhc(x: f64) -> f64 {
    if x.abs() < 1e-6 {
        1.0 + x * x / 6.0
    } else {
        x.sinh() / x
    }
}

fn sinhc_grad(x: f64) -> f64 {
    if x.abs() < 1e-2 {
        x / 3.0 + x * x * x / 30.0
    } else {
        (x * x.cosh() - x.sinh()) / (x * x)
    }
}

/// Reduction output shape for `sum`, `mean` and `squared-norm`.
fn reduce_shape(op: &'static str, shape: &[usize], axis: Option<usize>) -> Result<Vec<usize>> {
    match (axis, shape) {
        (None, _) => Ok(vec![1]),
        (Some(0), [_]) => Ok(vec![1]),
        (Some(0), [_, n]) => Ok(vec![1, *n]),
        (Some(1), [m, _]) => Ok(vec![*m, 1]),
        _ => Err(Error::dim(
            op,
            format!("axis {axis:?} invalid for shape {shape:?}"),
        )),
    }
}

/// Maps a flat input index to its reduction output index.
fn reduce_index(shape: &[usize], axis: Option<usize>, k: usize) -> usize {
    match (axis, shape) {
        (None, _) | (Some(0), [_]) => 0,
        (Some(0), [_, n]) => k % n,
        (Some(1), [_, n]) => k / n,
        _ => unreachable!(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            training: false,
            rng: None,
        }
    }

    /// A tape whose dropout ops sample masks from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Tape {
            nodes: Vec::new(),
            training: true,
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, None, Vec::new(), None, needs_grad)
    }

    /// Records a trainable copy of `tensor`.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.leaf(tensor.clone().with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Describes the first recorded value containing NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.is_finite()).then(|| {
                let op = n.op.as_ref().map_or("leaf", Op::name);
                format!("node #{i} ({op}, shape {:?})", n.value.shape())
            })
        })
    }

    fn push(
        &mut self,
        value: Tensor,
        op: Option<Op>,
        inputs: Vec<Var>,
        aux: Option<Vec<f64>>,
        needs_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            aux,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Applies `op` to `inputs` and records the result.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(Error::dim(
                    op.name(),
                    format!("expected {n} inputs, got {}", inputs.len()),
                ));
            }
        } else if inputs.is_empty() {
            return Err(Error::dim(op.name(), "no inputs"));
        }
        if let Op::Dropout { p } = op {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
            }
            if !self.training || p == 0.0 {
                return Ok(inputs[0]);
            }
        }
        let (value, aux) = self.forward(&op, inputs)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, Some(op), inputs.to_vec(), aux, needs_grad))
    }

    fn forward(&mut self, op: &Op, inputs: &[Var]) -> Result<(Tensor, Option<Vec<f64>>)> {
        let name = op.name();
        let x = &self.nodes[inputs[0].0].value;
        let unary = |f: &dyn Fn(f64) -> f64| Ok((x.map(f), None));
        match *op {
            Op::MatMul => {
                let y = &self.nodes[inputs[1].0].value;
                let (m, k) = shape2(name, x)?;
                let (k2, n) = shape2(name, y)?;
                if k != k2 {
                    return Err(Error::dim(
                        name,
                        format!("inner extents differ: [{m}, {k}] x [{k2}, {n}]"),
                    ));
                }
                let mut out = vec![0.0; m * n];
                matmul_into(x.data(), y.data(), &mut out, m, k, n);
                Ok((Tensor::matrix(m, n, out)?, None))
            }
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                let y = &self.nodes[inputs[1].0].value;
                let b = Bcast::resolve(name, x.shape(), y.shape())?;
                let (xd, yd) = (x.data(), y.data());
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add => |a, b| a + b,
                    Op::Sub => |a, b| a - b,
                    Op::Mul => |a, b| a * b,
                    _ => |a, b| a / b,
                };
                let out = (0..xd.len()).map(|k| f(xd[k], yd[b.map(k)])).collect();
                Ok((Tensor::new(x.shape().to_vec(), out)?, None))
            }
            Op::ScalarMul(c) => unary(&|v| c * v),
            Op::Concat { axis } => {
                let parts: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                Ok((concat(name, &parts, axis)?, None))
            }
            Op::Slice { axis, start, end } => {
                let shape = x.shape();
                let extent = *shape.get(axis).ok_or_else(|| {
                    Error::dim(name, format!("axis {axis} invalid for shape {shape:?}"))
                })?;
                if start >= end || end > extent {
                    return Err(Error::dim(
                        name,
                        format!("range {start}..{end} invalid for extent {extent}"),
                    ));
                }
                let (m, n) = if shape.len() == 1 {
                    (1, shape[0])
                } else {
                    (shape[0], shape[1])
                };
                let out = match (axis, shape.len()) {
                    (0, 1) => Tensor::vector(x.data()[start..end].to_vec())?,
                    (0, 2) => {
                        Tensor::matrix(end - start, n, x.data()[start * n..end * n].to_vec())?
                    }
                    (1, 2) => {
                        let w = end - start;
                        let mut out = Vec::with_capacity(m * w);
                        for i in 0..m {
                            out.extend_from_slice(&x.data()[i * n + start..i * n + end]);
                        }
                        Tensor::matrix(m, w, out)?
                    }
                    _ => return Err(Error::dim(name, format!("unsupported shape {shape:?}"))),
                };
                Ok((out, None))
            }
            Op::Transpose => {
                let (m, n) = shape2(name, x)?;
                Ok((Tensor::matrix(n, m, transpose_data(x.data(), m, n))?, None))
            }
            Op::Sum { axis } | Op::Mean { axis } | Op::SquaredNorm { axis } => {
                let shape = x.shape().to_vec();
                let out_shape = reduce_shape(name, &shape, axis)?;
                let count = x.numel() / out_shape.iter().product::<usize>();
                let mut out = vec![0.0; out_shape.iter().product()];
                for (k, &v) in x.data().iter().enumerate() {
                    let term = if matches!(op, Op::SquaredNorm { .. }) {
                        v * v
                    } else {
                        v
                    };
                    out[reduce_index(&shape, axis, k)] += term;
                }
                if matches!(op, Op::Mean { .. }) {
                    out.iter_mut().for_each(|o| *o /= count as f64);
                }
                Ok((Tensor::new(out_shape, out)?, None))
            }
            Op::Exp => unary(&f64::exp),
            Op::Sqrt => {
                if let Some(v) = x.data().iter().find(|v| **v < 0.0) {
                    return Err(Error::Domain {
                        op: name,
                        detail: format!("negative argument {v}"),
                    });
                }
                unary(&f64::sqrt)
            }
            Op::Sigmoid => unary(&sigmoid),
            Op::Softmax => {
                let n = x.cols();
                let mut out = x.data().to_vec();
                for row in out.chunks_mut(n) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        total += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= total);
                }
                Ok((Tensor::new(x.shape().to_vec(), out)?, None))
            }
            Op::Gelu => unary(&gelu),
            Op::Relu => unary(&|v| v.max(0.0)),
            Op::LeakyRelu { slope } => unary(&|v| if v > 0.0 { v } else { slope * v }),
            Op::Log => {
                if let Some(v) = x.data().iter().find(|v| **v <= 0.0) {
                    return Err(Error::Domain {
                        op: name,
                        detail: format!("non-positive argument {v}"),
                    });
                }
                unary(&f64::ln)
            }
            Op::Arccosh => {
                if let Some(v) = x
                    .data()
                    .iter()
                    .find(|v| **v < 1.0 - ARCCOSH_SLACK || v.is_nan())
                {
                    return Err(Error::Domain {
                        op: name,
                        detail: format!("argument {v} below 1"),
                    });
                }
                unary(&|v| v.max(ARCCOSH_FLOOR).acosh())
            }
            Op::Cosh => unary(&f64::cosh),
            Op::Sinh => unary(&f64::sinh),
            Op::Sinhc => unary(&sinhc),
            Op::Clamp { min, max } => unary(&|v| v.clamp(min, max)),
            Op::Dropout { p } => {
                let rng = self
                    .rng
                    .as_mut()
                    .ok_or_else(|| Error::Config("training tape has no RNG".into()))?;
                let scale = 1.0 / (1.0 - p);
                let mask: Vec<f64> = (0..x.numel())
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
                    .collect();
                let x = &self.nodes[inputs[0].0].value;
                let out = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
                Ok((Tensor::new(x.shape().to_vec(), out)?, Some(mask)))
            }
        }
    }

    /// Runs reverse accumulation from the scalar `loss`, consuming the tape.
    ///
    /// Every leaf created with `requires_grad` receives a gradient, zero if
    /// the loss does not depend on it.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (slot, input_grad) in self.input_grads(idx, op, &g).into_iter().enumerate() {
                let input = node.inputs[slot];
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                if let Some(ig) = input_grad {
                    match &mut grads[input.0] {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                        empty => *empty = Some(ig),
                    }
                }
            }
        }
        let leaf_grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                (node.op.is_none() && node.needs_grad)
                    .then(|| g.unwrap_or_else(|| vec![0.0; node.value.numel()]))
            })
            .collect();
        Ok(Gradients { grads: leaf_grads })
    }

    fn input_grads(&self, idx: usize, op: &Op, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let xt = &self.nodes[node.inputs[0].0].value;
        let x = xt.data();
        let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Vec<f64>>> {
            vec![Some((0..x.len()).map(|k| g[k] * f(k)).collect())]
        };
        match *op {
            Op::MatMul => {
                let yt = &self.nodes[node.inputs[1].0].value;
                let (m, k) = (xt.shape()[0], xt.shape()[1]);
                let n = yt.shape()[1];
                let mut gx = vec![0.0; m * k];
                let yt_t = transpose_data(yt.data(), k, n);
                matmul_into(g, &yt_t, &mut gx, m, n, k);
                let mut gy = vec![0.0; k * n];
                let xt_t = transpose_data(x, m, k);
                matmul_into(&xt_t, g, &mut gy, k, m, n);
                vec![Some(gx), Some(gy)]
            }
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                let yt = &self.nodes[node.inputs[1].0].value;
                let y = yt.data();
                let b = Bcast::resolve(op.name(), xt.shape(), yt.shape())
                    .expect("shapes validated in forward");
                let mut gx = vec![0.0; x.len()];
                let mut gy = vec![0.0; y.len()];
                for k in 0..x.len() {
                    let j = b.map(k);
                    let (dx, dy) = match op {
                        Op::Add => (1.0, 1.0),
                        Op::Sub => (1.0, -1.0),
                        Op::Mul => (y[j], x[k]),
                        _ => (1.0 / y[j], -x[k] / (y[j] * y[j])),
                    };
                    gx[k] += g[k] * dx;
                    gy[j] += g[k] * dy;
                }
                vec![Some(gx), Some(gy)]
            }
            Op::ScalarMul(c) => elementwise(&|_| c),
            Op::Concat { axis } => {
                let parts: Vec<&Tensor> =
                    node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                split_concat_grad(g, &parts, axis, node.value.cols())
            }
            Op::Slice { axis, start, end } => {
                let shape = xt.shape();
                let mut gx = vec![0.0; x.len()];
                match (axis, shape.len()) {
                    (0, 1) => gx[start..end].copy_from_slice(g),
                    (0, 2) => {
                        let n = shape[1];
                        gx[start * n..end * n].copy_from_slice(g);
                    }
                    _ => {
                        let (m, n) = (shape[0], shape[1]);
                        let w = end - start;
                        for i in 0..m {
                            gx[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::Transpose => {
                let (m, n) = (xt.shape()[0], xt.shape()[1]);
                vec![Some(transpose_data(g, n, m))]
            }
            Op::Sum { axis } | Op::Mean { axis } => {
                let count = (x.len() / out.len()) as f64;
                let scale = if matches!(op, Op::Mean { .. }) {
                    1.0 / count
                } else {
                    1.0
                };
                let shape = xt.shape();
                vec![Some(
                    (0..x.len())
                        .map(|k| g[reduce_index(shape, axis, k)] * scale)
                        .collect(),
                )]
            }
            Op::SquaredNorm { axis } => {
                let shape = xt.shape();
                vec![Some(
                    (0..x.len())
                        .map(|k| 2.0 * x[k] * g[reduce_index(shape, axis, k)])
                        .collect(),
                )]
            }
            Op::Exp => elementwise(&|k| out[k]),
            Op::Sqrt => elementwise(&|k| if out[k] > 0.0 { 0.5 / out[k] } else { 0.0 }),
            Op::Sigmoid => elementwise(&|k| out[k] * (1.0 - out[k])),
            Op::Softmax => {
                let n = node.value.cols();
                let mut gx = vec![0.0; x.len()];
                for ((grow, yrow), gxrow) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gxrow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                vec![Some(gx)]
            }
            Op::Gelu => elementwise(&|k| gelu_grad(x[k])),
            Op::Relu => elementwise(&|k| if x[k] > 0.0 { 1.0 } else { 0.0 }),
            Op::LeakyRelu { slope } => elementwise(&|k| if x[k] > 0.0 { 1.0 } else { slope }),
            Op::Log => elementwise(&|k| 1.0 / x[k]),
            Op::Arccosh => elementwise(&|k| {
                if x[k] > ARCCOSH_FLOOR {
                    1.0 / (x[k] * x[k] - 1.0).sqrt()
                } else {
                    0.0
                }
            }),
            Op::Cosh => elementwise(&|k| x[k].sinh()),
            Op::Sinh => elementwise(&|k| x[k].cosh()),
            Op::Sinhc => elementwise(&|k| sinhc_grad(x[k])),
            Op::Clamp { min, max } => {
                elementwise(&|k| if x[k] >= min && x[k] <= max { 1.0 } else { 0.0 })
            }
            Op::Dropout { .. } => {
                let mask = node.aux.as_ref().expect("dropout records its mask");
                elementwise(&|k| mask[k])
            }
        }
    }
}

fn concat(name: &'static str, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts[0].shape();
    match (axis, first.len()) {
        (0, 1) => {
            if parts.iter().any(|p| p.shape().len() != 1) {
                return Err(Error::dim(name, "mixed ranks"));
            }
            Tensor::vector(
                parts
                    .iter()
                    .flat_map(|p| p.data().iter().copied())
                    .collect(),
            )
        }
        (0, 2) => {
            let n = first[1];
            if parts
                .iter()
                .any(|p| p.shape().len() != 2 || p.shape()[1] != n)
            {
                return Err(Error::dim(name, "column counts differ along axis 0"));
            }
            let rows = parts.iter().map(|p| p.shape()[0]).sum();
            Tensor::matrix(
                rows,
                n,
                parts
                    .iter()
                    .flat_map(|p| p.data().iter().copied())
                    .collect(),
            )
        }
        (1, 2) => {
            let m = first[0];
            if parts
                .iter()
                .any(|p| p.shape().len() != 2 || p.shape()[0] != m)
            {
                return Err(Error::dim(name, "row counts differ along axis 1"));
            }
            let n: usize = parts.iter().map(|p| p.shape()[1]).sum();
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                for p in parts {
                    out.extend_from_slice(p.row(i));
                }
            }
            Tensor::matrix(m, n, out)
        }
        _ => Err(Error::dim(
            name,
            format!("axis {axis} invalid for shape {first:?}"),
        )),
    }
}

fn split_concat_grad(
    g: &[f64],
    parts: &[&Tensor],
    axis: usize,
    out_cols: usize,
) -> Vec<Option<Vec<f64>>> {
    if axis == 0 {
        let mut offset = 0;
        parts
            .iter()
            .map(|p| {
                let n = p.numel();
                let chunk = g[offset..offset + n].to_vec();
                offset += n;
                Some(chunk)
            })
            .collect()
    } else {
        let m = parts[0].shape()[0];
        let mut col = 0;
        parts
            .iter()
            .map(|p| {
                let w = p.shape()[1];
                let mut chunk = Vec::with_capacity(m * w);
                for i in 0..m {
                    chunk.extend_from_slice(&g[i * out_cols + col..i * out_cols + col + w]);
                }
                col += w;
                Some(chunk)
            })
            .collect()
    }
}

macro_rules! unary_methods {
    ($($fn_name:ident => $op:expr),* $(,)?) => {
        $(
            pub fn $fn_name(&mut self, x: Var) -> Result<Var> {
                self.apply($op, &[x])
            }
        )*
    };
}

macro_rules! binary_methods {
    ($($fn_name:ident => $op:expr),* $(,)?) => {
        $(
            pub fn $fn_name(&mut self, a: Var, b: Var) -> Result<Var> {
                self.apply($op, &[a, b])
            }
        )*
    };
}

impl Tape {
    binary_methods! {
        matmul => Op::MatMul,
        add => Op::Add,
        sub => Op::Sub,
        mul => Op::Mul,
        div => Op::Div,
    }

    unary_methods! {
        transpose => Op::Transpose,
        exp => Op::Exp,
        sqrt => Op::Sqrt,
        sigmoid => Op::Sigmoid,
        softmax => Op::Softmax,
        gelu => Op::Gelu,
        relu => Op::Relu,
        log => Op::Log,
        arccosh => Op::Arccosh,
        cosh => Op::Cosh,
        sinh => Op::Sinh,
        sinhc => Op::Sinhc,
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Op::ScalarMul(c), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, parts)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, end }, &[x])
    }

    /// Columns `start..end` of a matrix.
    pub fn cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.slice(x, 1, start, end)
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(Op::Sum { axis }, &[x])
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(Op::Mean { axis }, &[x])
    }

    pub fn squared_norm(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(Op::SquaredNorm { axis }, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.apply(Op::LeakyRelu { slope }, &[x])
    }

    pub fn clamp(&mut self, x: Var, min: f64, max: f64) -> Result<Var> {
        self.apply(Op::Clamp { min, max }, &[x])
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        self.apply(Op::Dropout { p }, &[x])
    }

    /// `x * w^T + b` for a weight stored as `[out, in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let wt = self.transpose(weight)?;
        let y = self.matmul(x, wt)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Adds a constant to every element.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = self.scalar(c);
        self.add(x, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn vec_leaf(tape: &mut Tape, data: &[f64]) -> Var {
        tape.leaf(
            Tensor::vector(data.to_vec())
                .unwrap()
                .with_requires_grad(true),
        )
    }

    #[test]
    fn softmax_of_uniform_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[0.0, 0.0, 0.0]);
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.scalar(0.0);
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn leaky_relu_uses_given_slope() {
        let slope = -2.0;
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[-1.0, 2.0]);
        let y = tape.leaky_relu(x, slope).unwrap();
        assert_eq!(tape.value(y).data(), &[-slope, 2.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0, 3.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq, None).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_of_dot_at_zero_weights() {
        let xs = [0.5, -1.5, 2.0];
        let mut tape = Tape::new();
        let w = tape.leaf(
            Tensor::matrix(1, 3, vec![0.0; 3])
                .unwrap()
                .with_requires_grad(true),
        );
        let x = tape.constant(Tensor::matrix(3, 1, xs.to_vec()).unwrap());
        let z = tape.matmul(w, x).unwrap();
        let s = tape.sigmoid(z).unwrap();
        let grads = tape.backward(s).unwrap();
        let g = grads.get(w).unwrap();
        for (gi, xi) in g.iter().zip(xs) {
            assert!((gi - 0.25 * xi).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        let y = tape.exp(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("unexpected {other:?}"),
        }
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            tape.add(a, c),
            Err(Error::Dimension { op: "add", .. })
        ));
    }

    #[test]
    fn arccosh_rejects_arguments_below_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.5]).unwrap());
        assert!(matches!(
            tape.arccosh(x),
            Err(Error::Domain { op: "arccosh", .. })
        ));
        let y = tape.constant(Tensor::vector(vec![1.0 - 1e-14]).unwrap());
        let z = tape.arccosh(y).unwrap();
        assert!(tape.value(z).item() > 0.0);
    }

    #[test]
    fn dropout_is_identity_outside_training() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0, 3.0]);
        let y = tape.dropout(x, 0.5).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_scales_kept_units() {
        let mut tape = Tape::training(ChaCha8Rng::seed_from_u64(3));
        let x = tape.leaf(Tensor::full(&[1000], 1.0).with_requires_grad(true));
        let y = tape.dropout(x, 0.1).unwrap();
        let vals = tape.value(y).data().to_vec();
        assert!(vals
            .iter()
            .all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-15));
        let dropped = vals.iter().filter(|v| **v == 0.0).count();
        assert!((50..150).contains(&dropped), "dropped {dropped}");
        let loss = tape.sum(y, None).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), vals.as_slice());
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0]);
        let unused = vec_leaf(&mut tape, &[4.0, 5.0]);
        let loss = tape.exp(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn broadcast_gradients_reduce() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3], 1.0).with_requires_grad(true));
        let row = vec_leaf(&mut tape, &[1.0, 2.0, 3.0]);
        let col = tape.leaf(
            Tensor::matrix(2, 1, vec![2.0, 4.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let y = tape.add(x, row).unwrap();
        let z = tape.mul(y, col).unwrap();
        let loss = tape.sum(z, None).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(row).unwrap(), &[6.0, 6.0, 6.0]);
        assert_eq!(grads.get(col).unwrap(), &[9.0, 9.0]);
    }

    #[test]
    fn first_non_finite_reports_node() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1000.0]).unwrap());
        let y = tape.exp(x).unwrap();
        let _ = tape.exp(y).unwrap();
        let msg = tape.first_non_finite().unwrap();
        assert!(msg.contains("exp"), "{msg}");
    }
}
