//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to a [`Var`]. Leaves are
//! created either as tracked parameters ([`Tape::param`]) or untracked
//! constants ([`Tape::constant`]); any primitive with at least one tracked
//! input produces a tracked node. Calling [`Var::backward`] on a tracked
//! scalar walks the tape once in reverse insertion order (which is a
//! reverse topological order, since nodes can only reference earlier ones)
//! and returns a [`Gradients`] table.
//!
//! ```
//! use asmpc_core::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = x.square().unwrap();
//! let grads = y.backward().unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data()[0], 6.0);
//! ```
//!
//! Tapes are cheap; the training loops build a fresh one per step.

use std::cell::{Cell, RefCell};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor with shape {shape:?} needs {expected} values, got {got}")]
    BadLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not connected to any tracked parameter")]
    UntrackedLoss,
    #[error("backward was already run on this tape; reset it first")]
    BackwardAlreadyRun,
}

pub type Result<T> = std::result::Result<T, AdError>;

/// Row-major dense array of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(AdError::BadLength {
                shape,
                expected,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AdError::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
        }
    }

    /// 1-D tensor.
    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
        }
    }

    /// 2-D tensor from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.values
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_data(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Elu,
    Softplus,
    Square,
    Mean,
    Sum,
    Log,
    Exp,
    Neg,
    Scale,
    Offset,
    ScalarMul,
    LogAddExp,
    Slice,
    Reshape,
    Concat,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::MatMul => "matmul",
            Primitive::Elu => "elu",
            Primitive::Softplus => "softplus",
            Primitive::Square => "square",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::Neg => "neg",
            Primitive::Scale => "scale",
            Primitive::Offset => "offset",
            Primitive::ScalarMul => "scalar_mul",
            Primitive::LogAddExp => "logaddexp",
            Primitive::Slice => "slice",
            Primitive::Reshape => "reshape",
            Primitive::Concat => "concat",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary(Primitive, usize),
    Binary(Primitive, usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Slice(usize, usize),
    Concat(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Operation record for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tracked leaf: gradients are reported for it.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Evaluates a primitive on the given inputs and records it.
    pub fn forward_primitive<'t>(&'t self, op: Primitive, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        match (op, inputs) {
            (Primitive::Concat, xs) => concat(xs),
            (
                Primitive::Add
                | Primitive::Sub
                | Primitive::Mul
                | Primitive::Div
                | Primitive::MatMul
                | Primitive::ScalarMul
                | Primitive::LogAddExp,
                [a, b],
            ) => a.binary(op, *b),
            (
                Primitive::Elu
                | Primitive::Softplus
                | Primitive::Square
                | Primitive::Mean
                | Primitive::Sum
                | Primitive::Log
                | Primitive::Exp
                | Primitive::Neg,
                [a],
            ) => a.unary(op),
            _ => Err(AdError::ShapeMismatch {
                op: op.name(),
                lhs: vec![inputs.len()],
                rhs: vec![],
            }),
        }
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(AdError::NonFinite { op })
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logaddexp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Scalar helpers shared with the non-taped code paths.
pub mod scalar {
    pub fn elu(x: f64) -> f64 {
        super::elu(x)
    }
    pub fn softplus(x: f64) -> f64 {
        super::softplus(x)
    }
    pub fn sigmoid(x: f64) -> f64 {
        super::sigmoid(x)
    }
    /// Inverse of softplus for `y > 0`.
    pub fn softplus_inv(y: f64) -> f64 {
        y + (-(-y).exp_m1()).ln()
    }
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = match a.shape() {
        [m, k] => (*m, *k),
        _ => {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            })
        }
    };
    let n = match b.shape() {
        [k2, n] if *k2 == k => *n,
        _ => {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            })
        }
    };
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.values[i * k + p] * b.values[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        values: out,
    })
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape.clone()
    }

    /// First element; convenient for scalar losses.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.values[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn unary(self, op: Primitive) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let map = |f: fn(f64) -> f64| Tensor {
                shape: a.shape.clone(),
                values: a.values.iter().map(|&v| f(v)).collect(),
            };
            match op {
                Primitive::Elu => map(elu),
                Primitive::Softplus => map(softplus),
                Primitive::Square => map(|v| v * v),
                Primitive::Log => map(f64::ln),
                Primitive::Exp => map(f64::exp),
                Primitive::Neg => map(|v| -v),
                Primitive::Sum => Tensor::scalar(a.values.iter().sum()),
                Primitive::Mean => {
                    Tensor::scalar(a.values.iter().sum::<f64>() / a.values.len() as f64)
                }
                _ => unreachable!("not a unary primitive"),
            }
        };
        check_finite(op.name(), &value)?;
        let tracked = self.is_tracked();
        Ok(self.tape.push(value, Op::Unary(op, self.id), tracked))
    }

    fn binary(self, op: Primitive, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[rhs.id].value;
            let zip = |f: fn(f64, f64) -> f64| -> Result<Tensor> {
                if a.shape != b.shape {
                    return Err(AdError::ShapeMismatch {
                        op: op.name(),
                        lhs: a.shape.clone(),
                        rhs: b.shape.clone(),
                    });
                }
                Ok(Tensor {
                    shape: a.shape.clone(),
                    values: a
                        .values
                        .iter()
                        .zip(&b.values)
                        .map(|(&x, &y)| f(x, y))
                        .collect(),
                })
            };
            match op {
                Primitive::Add => zip(|x, y| x + y)?,
                Primitive::Sub => zip(|x, y| x - y)?,
                Primitive::Mul => zip(|x, y| x * y)?,
                Primitive::Div => zip(|x, y| x / y)?,
                Primitive::LogAddExp => zip(logaddexp)?,
                Primitive::MatMul => matmul_values(a, b)?,
                Primitive::ScalarMul => {
                    if a.numel() != 1 {
                        return Err(AdError::ShapeMismatch {
                            op: op.name(),
                            lhs: a.shape.clone(),
                            rhs: b.shape.clone(),
                        });
                    }
                    let s = a.values[0];
                    Tensor {
                        shape: b.shape.clone(),
                        values: b.values.iter().map(|v| s * v).collect(),
                    }
                }
                _ => unreachable!("not a binary primitive"),
            }
        };
        check_finite(op.name(), &value)?;
        let tracked = self.is_tracked() || rhs.is_tracked();
        Ok(self
            .tape
            .push(value, Op::Binary(op, self.id, rhs.id), tracked))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Primitive::Add, rhs)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Primitive::Sub, rhs)
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Primitive::Mul, rhs)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Primitive::Div, rhs)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Primitive::MatMul, rhs)
    }

    /// `self` must hold a single element; multiplies every entry of `rhs` by it.
    pub fn scalar_mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Primitive::ScalarMul, rhs)
    }

    pub fn logaddexp(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Primitive::LogAddExp, rhs)
    }

    pub fn elu(self) -> Result<Var<'t>> {
        self.unary(Primitive::Elu)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary(Primitive::Softplus)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(Primitive::Square)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.unary(Primitive::Mean)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(Primitive::Sum)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary(Primitive::Log)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Primitive::Exp)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(Primitive::Neg)
    }

    /// Multiplies by a constant.
    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            Tensor {
                shape: a.shape.clone(),
                values: a.values.iter().map(|v| v * c).collect(),
            }
        };
        check_finite("scale", &value)?;
        let tracked = self.is_tracked();
        Ok(self.tape.push(value, Op::Scale(self.id, c), tracked))
    }

    /// Adds a constant to every entry.
    pub fn offset(self, c: f64) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            Tensor {
                shape: a.shape.clone(),
                values: a.values.iter().map(|v| v + c).collect(),
            }
        };
        check_finite("offset", &value)?;
        let tracked = self.is_tracked();
        Ok(self.tape.push(value, Op::Offset(self.id), tracked))
    }

    /// Contiguous range of the flattened values, as a 1-D tensor.
    pub fn slice(self, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            if start + len > a.numel() {
                return Err(AdError::ShapeMismatch {
                    op: "slice",
                    lhs: a.shape.clone(),
                    rhs: vec![start, len],
                });
            }
            Tensor::vector(a.values[start..start + len].to_vec())
        };
        let tracked = self.is_tracked();
        Ok(self.tape.push(value, Op::Slice(self.id, start), tracked))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let value = self.value().reshaped(shape)?;
        let tracked = self.is_tracked();
        Ok(self
            .tape
            .push(value, Op::Unary(Primitive::Reshape, self.id), tracked))
    }

    /// Reverse pass from this scalar. Allowed once per tape until [`Tape::reset`].
    pub fn backward(self) -> Result<Gradients> {
        let tape = self.tape;
        let nodes = tape.nodes.borrow();
        let root = &nodes[self.id];
        if root.value.numel() != 1 {
            return Err(AdError::NonScalarLoss(root.value.shape.clone()));
        }
        if !root.tracked {
            return Err(AdError::UntrackedLoss);
        }
        if tape.consumed.replace(true) {
            return Err(AdError::BackwardAlreadyRun);
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![1.0]);

        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Unary(op, a) => {
                    let a = *a;
                    if !nodes[a].tracked {
                        grads[id] = Some(g);
                        continue;
                    }
                    let x = &nodes[a].value.values;
                    let y = &node.value.values;
                    let contrib: Vec<f64> = match op {
                        Primitive::Elu => g
                            .iter()
                            .zip(x)
                            .map(|(g, &x)| if x > 0.0 { *g } else { g * x.exp() })
                            .collect(),
                        Primitive::Softplus => {
                            g.iter().zip(x).map(|(g, &x)| g * sigmoid(x)).collect()
                        }
                        Primitive::Square => g.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect(),
                        Primitive::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                        Primitive::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                        Primitive::Neg => g.iter().map(|g| -g).collect(),
                        Primitive::Sum => vec![g[0]; x.len()],
                        Primitive::Mean => vec![g[0] / x.len() as f64; x.len()],
                        Primitive::Reshape => g.clone(),
                        _ => unreachable!(),
                    };
                    accumulate(&mut grads[a], &contrib);
                }
                Op::Binary(op, a, b) => {
                    let (a, b) = (*a, *b);
                    let (ta, tb) = (nodes[a].tracked, nodes[b].tracked);
                    let xa = &nodes[a].value;
                    let xb = &nodes[b].value;
                    match op {
                        Primitive::Add => {
                            if ta {
                                accumulate(&mut grads[a], &g);
                            }
                            if tb {
                                accumulate(&mut grads[b], &g);
                            }
                        }
                        Primitive::Sub => {
                            if ta {
                                accumulate(&mut grads[a], &g);
                            }
                            if tb {
                                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                                accumulate(&mut grads[b], &neg);
                            }
                        }
                        Primitive::Mul => {
                            if ta {
                                let c: Vec<f64> =
                                    g.iter().zip(&xb.values).map(|(g, y)| g * y).collect();
                                accumulate(&mut grads[a], &c);
                            }
                            if tb {
                                let c: Vec<f64> =
                                    g.iter().zip(&xa.values).map(|(g, x)| g * x).collect();
                                accumulate(&mut grads[b], &c);
                            }
                        }
                        Primitive::Div => {
                            if ta {
                                let c: Vec<f64> =
                                    g.iter().zip(&xb.values).map(|(g, y)| g / y).collect();
                                accumulate(&mut grads[a], &c);
                            }
                            if tb {
                                let c: Vec<f64> = g
                                    .iter()
                                    .zip(&xa.values)
                                    .zip(&xb.values)
                                    .map(|((g, x), y)| -g * x / (y * y))
                                    .collect();
                                accumulate(&mut grads[b], &c);
                            }
                        }
                        Primitive::LogAddExp => {
                            let out = &node.value.values;
                            if ta {
                                let c: Vec<f64> = g
                                    .iter()
                                    .zip(&xa.values)
                                    .zip(out)
                                    .map(|((g, x), o)| g * (x - o).exp())
                                    .collect();
                                accumulate(&mut grads[a], &c);
                            }
                            if tb {
                                let c: Vec<f64> = g
                                    .iter()
                                    .zip(&xb.values)
                                    .zip(out)
                                    .map(|((g, y), o)| g * (y - o).exp())
                                    .collect();
                                accumulate(&mut grads[b], &c);
                            }
                        }
                        Primitive::MatMul => {
                            let (m, k) = (xa.shape[0], xa.shape[1]);
                            let n = xb.shape[1];
                            if ta {
                                // dA = G · Bᵀ
                                let mut c = vec![0.0; m * k];
                                for i in 0..m {
                                    for p in 0..k {
                                        let mut acc = 0.0;
                                        for j in 0..n {
                                            acc += g[i * n + j] * xb.values[p * n + j];
                                        }
                                        c[i * k + p] = acc;
                                    }
                                }
                                accumulate(&mut grads[a], &c);
                            }
                            if tb {
                                // dB = Aᵀ · G
                                let mut c = vec![0.0; k * n];
                                for p in 0..k {
                                    for j in 0..n {
                                        let mut acc = 0.0;
                                        for i in 0..m {
                                            acc += xa.values[i * k + p] * g[i * n + j];
                                        }
                                        c[p * n + j] = acc;
                                    }
                                }
                                accumulate(&mut grads[b], &c);
                            }
                        }
                        Primitive::ScalarMul => {
                            let s = xa.values[0];
                            if ta {
                                let d: f64 = g.iter().zip(&xb.values).map(|(g, y)| g * y).sum();
                                accumulate(&mut grads[a], &[d]);
                            }
                            if tb {
                                let c: Vec<f64> = g.iter().map(|g| g * s).collect();
                                accumulate(&mut grads[b], &c);
                            }
                        }
                        _ => unreachable!(),
                    }
                }
                Op::Scale(a, c) => {
                    if nodes[*a].tracked {
                        let v: Vec<f64> = g.iter().map(|g| g * c).collect();
                        accumulate(&mut grads[*a], &v);
                    }
                }
                Op::Offset(a) => {
                    if nodes[*a].tracked {
                        accumulate(&mut grads[*a], &g);
                    }
                }
                Op::Slice(a, start) => {
                    if nodes[*a].tracked {
                        let mut v = vec![0.0; nodes[*a].value.numel()];
                        v[*start..*start + g.len()].copy_from_slice(&g);
                        accumulate(&mut grads[*a], &v);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = nodes[p].value.numel();
                        if nodes[p].tracked {
                            accumulate(&mut grads[p], &g[offset..offset + n]);
                        }
                        offset += n;
                    }
                }
            }
            // Leaves keep their gradient; interior nodes are dropped once propagated.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.filter(|_| nodes[id].tracked && matches!(nodes[id].op, Op::Leaf))
                    .map(|values| Tensor {
                        shape: nodes[id].value.shape.clone(),
                        values,
                    })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        None => *slot = Some(contrib.to_vec()),
    }
}

/// Concatenates the flattened values of `parts` into one 1-D tensor.
pub fn concat<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let Some(first) = parts.first() else {
        return Err(AdError::ShapeMismatch {
            op: "concat",
            lhs: vec![],
            rhs: vec![],
        });
    };
    let tape = first.tape;
    let mut values = Vec::new();
    let mut tracked = false;
    {
        let nodes = tape.nodes.borrow();
        for p in parts {
            first.same_tape(p);
            values.extend_from_slice(&nodes[p.id].value.values);
            tracked |= nodes[p.id].tracked;
        }
    }
    let ids = parts.iter().map(|p| p.id).collect();
    Ok(tape.push(Tensor::vector(values), Op::Concat(ids), tracked))
}

/// Gradients of a scalar loss with respect to the tracked leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a tracked leaf; `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::wrt`] but returns zeros shaped like `v` when absent.
    pub fn wrt_or_zero(&self, v: Var<'_>) -> Tensor {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}
