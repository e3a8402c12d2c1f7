//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! returns the gradient of that output with respect to every leaf created
//! with [`Tape::leaf`]. Constants ([`Tape::constant`]) never receive
//! gradients and operations whose inputs are all constants are not
//! differentiated through.
//!
//! Lifecycle: a tape is append-only while `Var`s borrow it. Build the
//! forward computation, call `backward` (which does not consume the tape,
//! so several outputs may be differentiated), then drop the tape or call
//! [`Tape::clear`] once no `Var` is alive. Memory grows with the number of
//! recorded intermediate values; an unrolled ODE solve of `T` steps keeps
//! `O(T)` activations of the velocity network alive until the tape is
//! dropped.
//!
//! Non-finite values do not panic. The first operation that produces a NaN
//! or infinity poisons the tape; [`Tape::check`] and [`Tape::backward`] then
//! report it as [`Error::NonFinite`].

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use super::kernels::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Storage precision of values produced on a tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    Double,
    /// Every produced value is rounded to the nearest `f32`. Arithmetic still
    /// runs in `f64`; this reproduces single-precision storage error, not
    /// single-precision throughput.
    Single,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sin(usize),
    Cos(usize),
    Sqrt(usize),
    Square(usize),
    Abs(usize),
    MatMul(usize, usize),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize, usize),
    Reshape(usize),
    Broadcast(usize),
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
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::MatMul(..) => "matmul",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumCols(_) => "sum_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::Reshape(_) => "reshape",
            Op::Broadcast(_) => "broadcast",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::ConcatCols(v) => v.clone(),
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumCols(a)
            | Op::SliceCols(a, _, _)
            | Op::Reshape(a)
            | Op::Broadcast(a) => vec![*a],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    precision: Precision,
    poison: RefCell<Option<String>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients of one scalar output, indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of its shape when `v` was unreachable.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }

    pub fn wrt_all(&self, vars: &[Var<'_>]) -> Vec<Tensor> {
        vars.iter().map(|&v| self.wrt(v)).collect()
    }
}

fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

fn binary_values(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Option<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data).ok();
    }
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let (r, c) = broadcast_dims((ar, ac), (br, bc))?;
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let ia = if ar == 1 { 0 } else { i * ac };
        let ib = if br == 1 { 0 } else { i * bc };
        for j in 0..c {
            let x = ad[ia + if ac == 1 { 0 } else { j }];
            let y = bd[ib + if bc == 1 { 0 } else { j }];
            data.push(f(x, y));
        }
    }
    Tensor::matrix(r, c, data).ok()
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    let target = Tensor::zeros(shape).dims2();
    let (gr, gc) = g.dims2();
    let mut out = vec![0.0; target.0 * target.1];
    let gd = g.data();
    for i in 0..gr {
        let oi = if target.0 == 1 { 0 } else { i };
        for j in 0..gc {
            let oj = if target.1 == 1 { 0 } else { j };
            out[oi * target.1 + oj] += gd[i * gc + j];
        }
    }
    Tensor::new(shape.to_vec(), out).expect("reduced gradient matches target shape")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self { precision, ..Self::default() }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Requires that no `Var` is alive.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
        *self.poison.get_mut() = None;
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// `Err` if any recorded op produced a non-finite value.
    pub fn check(&self) -> Result<()> {
        match self.poison.borrow().as_ref() {
            Some(op) => Err(Error::NonFinite(op.clone())),
            None => Ok(()),
        }
    }

    fn push(&self, mut value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        if self.precision == Precision::Single {
            value.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
        if !value.all_finite() {
            let mut poison = self.poison.borrow_mut();
            if poison.is_none() {
                *poison = Some(op.name().to_string());
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.needs_grad(&op.inputs());
        self.push(value, op, rg)
    }

    fn binary(&self, a: usize, b: usize, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'_> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = binary_values(&va, &vb, f).unwrap_or_else(|| {
            panic!("{}: incompatible shapes {:?} and {:?}", op.name(), va.shape(), vb.shape())
        });
        self.record(out, op)
    }

    fn unary(&self, a: usize, op: Op, f: impl Fn(f64) -> f64) -> Var<'_> {
        let out = self.value(a).map(f);
        self.record(out, op)
    }

    /// Concatenates `[rows, c_i]` vars along columns.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| self.value(p.id)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::hstack(&refs).unwrap_or_else(|e| panic!("concat_cols: {e}"));
        self.record(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    /// Gradients of the scalar `output` with respect to every leaf.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        self.check()?;
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(Error::NotScalar(out.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        if !out.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.id] = Some(Tensor::full(out.value.shape(), 1.0));

        let accum = |grads: &mut Vec<Option<Tensor>>, id: usize, g: Tensor| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("backward through {}", node.op.name())));
            }
            let y = &node.value;
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    accum(&mut grads, *a, reduce_to(g.clone(), val(*a).shape()));
                    accum(&mut grads, *b, reduce_to(g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, reduce_to(g.clone(), val(*a).shape()));
                    accum(&mut grads, *b, reduce_to(g.map(|x| -x), val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        let ga = binary_values(&g, vb, |g, y| g * y).expect("mul grad");
                        accum(&mut grads, *a, reduce_to(ga, va.shape()));
                    }
                    if nodes[*b].requires_grad {
                        let gb = binary_values(&g, va, |g, x| g * x).expect("mul grad");
                        accum(&mut grads, *b, reduce_to(gb, vb.shape()));
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        let ga = binary_values(&g, vb, |g, y| g / y).expect("div grad");
                        accum(&mut grads, *a, reduce_to(ga, va.shape()));
                    }
                    if nodes[*b].requires_grad {
                        // d(a/b)/db = -(a/b)/b = -out/b
                        let q = binary_values(y, vb, |o, y| -o / y).expect("div grad");
                        let gb = binary_values(&g, &q, |g, q| g * q).expect("div grad");
                        accum(&mut grads, *b, reduce_to(gb, vb.shape()));
                    }
                }
                Op::Neg(a) => accum(&mut grads, *a, g.map(|x| -x)),
                Op::Scale(a, c) => accum(&mut grads, *a, g.map(|x| x * c)),
                Op::AddScalar(a) => accum(&mut grads, *a, g),
                Op::Exp(a) => accum(&mut grads, *a, g.zip_map(y, |g, y| g * y)?),
                Op::Log(a) => accum(&mut grads, *a, g.zip_map(val(*a), |g, x| g / x)?),
                Op::Tanh(a) => accum(&mut grads, *a, g.zip_map(y, |g, y| g * (1.0 - y * y))?),
                Op::Sin(a) => accum(&mut grads, *a, g.zip_map(val(*a), |g, x| g * x.cos())?),
                Op::Cos(a) => accum(&mut grads, *a, g.zip_map(val(*a), |g, x| -g * x.sin())?),
                Op::Sqrt(a) => accum(&mut grads, *a, g.zip_map(y, |g, y| 0.5 * g / y)?),
                Op::Square(a) => accum(&mut grads, *a, g.zip_map(val(*a), |g, x| 2.0 * g * x)?),
                Op::Abs(a) => accum(
                    &mut grads,
                    *a,
                    g.zip_map(val(*a), |g, x| if x == 0.0 { 0.0 } else { g * x.signum() })?,
                ),
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (m, k) = va.dims2();
                    let n = vb.cols();
                    if nodes[*a].requires_grad {
                        // dA = G B^T
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), n, 1, vb.data(), 1, n, &mut da);
                        accum(&mut grads, *a, Tensor::new(va.shape().to_vec(), da)?);
                    }
                    if nodes[*b].requires_grad {
                        // dB = A^T G
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, va.data(), 1, k, g.data(), n, 1, &mut db);
                        accum(&mut grads, *b, Tensor::new(vb.shape().to_vec(), db)?);
                    }
                }
                Op::Sum(a) => {
                    accum(&mut grads, *a, Tensor::full(val(*a).shape(), g.item()));
                }
                Op::Mean(a) => {
                    let n = val(*a).len().max(1) as f64;
                    accum(&mut grads, *a, Tensor::full(val(*a).shape(), g.item() / n));
                }
                Op::SumCols(a) => {
                    let va = val(*a);
                    let (r, c) = va.dims2();
                    let mut out = Vec::with_capacity(r * c);
                    for i in 0..r {
                        out.extend(std::iter::repeat_n(g.data()[i], c));
                    }
                    accum(&mut grads, *a, Tensor::new(va.shape().to_vec(), out)?);
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let vp = val(p);
                        let c = vp.cols();
                        if nodes[p].requires_grad {
                            let mut out = Vec::with_capacity(rows * c);
                            for i in 0..rows {
                                out.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                            }
                            accum(&mut grads, p, Tensor::new(vp.shape().to_vec(), out)?);
                        }
                        offset += c;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let va = val(*a);
                    let (r, c) = va.dims2();
                    let w = end - start;
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        out[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    accum(&mut grads, *a, Tensor::new(va.shape().to_vec(), out)?);
                }
                Op::Reshape(a) => {
                    accum(&mut grads, *a, g.reshape(val(*a).shape().to_vec())?);
                }
                Op::Broadcast(a) => {
                    accum(&mut grads, *a, reduce_to(g, val(*a).shape()));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    /// Owned copy of the value.
    pub fn to_tensor(&self) -> Tensor {
        (*self.value()).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.to_tensor())
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        let out = a
            .matmul(&b)
            .unwrap_or_else(|_| panic!("matmul: {:?} x {:?}", a.shape(), b.shape()));
        self.tape.record(out, Op::MatMul(self.id, rhs.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Log(self.id), f64::ln)
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Tanh(self.id), f64::tanh)
    }

    pub fn sin(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sin(self.id), f64::sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Cos(self.id), f64::cos)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Square(self.id), |x| x * x)
    }

    pub fn abs(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Abs(self.id), f64::abs)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::AddScalar(self.id), |x| x + c)
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.record(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let m = self.value().mean();
        self.tape.record(Tensor::scalar(m), Op::Mean(self.id))
    }

    /// Row-wise sum of a `[rows, cols]` var, giving `[rows, 1]`.
    pub fn sum_cols(self) -> Var<'t> {
        let v = self.value();
        let (r, c) = v.dims2();
        let data = (0..r).map(|i| v.data()[i * c..(i + 1) * c].iter().sum()).collect();
        self.tape.record(Tensor::column(data), Op::SumCols(self.id))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let v = self.value();
        let (r, c) = v.dims2();
        assert!(start <= end && end <= c, "slice_cols {start}..{end} of {c} columns");
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&v.data()[i * c + start..i * c + end]);
        }
        let out = Tensor::matrix(r, end - start, data).expect("slice shape");
        self.tape.record(out, Op::SliceCols(self.id, start, end))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Var<'t> {
        let out = self.to_tensor().reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        self.tape.record(out, Op::Reshape(self.id))
    }

    /// Explicit broadcast to `[rows, cols]`.
    pub fn broadcast_to(self, rows: usize, cols: usize) -> Var<'t> {
        let target = Tensor::zeros(&[rows, cols]);
        let out = binary_values(&self.value(), &target, |x, _| x)
            .unwrap_or_else(|| panic!("broadcast {:?} to [{rows},{cols}]", self.shape()));
        self.tape.record(out, Op::Broadcast(self.id))
    }
}

macro_rules! impl_binary {
    ($trait:ident, $method:ident, $op:ident, $f:expr) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                debug_assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
                self.tape.binary(self.id, rhs.id, Op::$op(self.id, rhs.id), $f)
            }
        }
    };
}

impl_binary!(Add, add, Add, |a, b| a + b);
impl_binary!(Sub, sub, Sub, |a, b| a - b);
impl_binary!(Mul, mul, Mul, |a, b| a * b);
impl_binary!(Div, div, Div, |a, b| a / b);

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.add_scalar(rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.add_scalar(-rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs.scale(self)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Neg(self.id), |x| -x)
    }
}
