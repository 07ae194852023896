//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in creation
//! order, so parents always precede children. [`Tape::backward`] replays the
//! record once, in reverse, accumulating adjoints. A tape is single-threaded;
//! independent computations each get their own tape.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::conv;
use crate::error::{dim_err, Error, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddScalar(usize),
    Exp(usize),
    Ln(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Square(usize),
    Sqrt(usize),
    Clamp(usize, T, T),
    Sum(usize),
    SumAxis(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    RowScale(usize, usize),
    AddRow(usize, usize),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Narrow(usize, usize, usize),
    IndexRows(usize, Vec<usize>),
    Expand(usize),
    Cholesky(usize),
    TriSolve(usize, usize, bool),
    Conv(usize, usize),
    ChannelBias(usize, usize),
    LogSumExp(usize),
    Diag(usize),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    tracked: bool,
}

/// Ordered record of operations sufficient to replay adjoints.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Adjoints produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// A leaf that participates in differentiation.
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, x: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(x))
    }

    pub fn zeros(&self, shape: &[usize]) -> Var<'_, T> {
        self.constant(Tensor::zeros(shape))
    }

    pub fn ones(&self, shape: &[usize]) -> Var<'_, T> {
        self.constant(Tensor::ones(shape))
    }

    /// Runs the reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.replace(true) {
            return Err(Error::TapeReused);
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.tracked {
                backprop(&nodes, id, &g, &mut grads)?;
            }
            grads[id] = Some(g);
        }
        grads.resize(nodes.len(), None);
        for (i, g) in grads.iter_mut().enumerate() {
            if !nodes[i].tracked {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    id: usize,
    g: Tensor<T>,
) {
    if !nodes[id].tracked {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn tril<T: Scalar>(mut m: Tensor<T>) -> Tensor<T> {
    let n = m.shape()[0];
    for i in 0..n {
        for j in i + 1..n {
            m[[i, j]] = T::zero();
        }
    }
    m
}

fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let val = |i: usize| nodes[i].value.as_ref();
    let out = val(id);
    let mut acc = |i: usize, t: Tensor<T>| accumulate(nodes, grads, i, t);
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(*a, g.clone());
            acc(*b, g.clone());
        }
        Op::Sub(a, b) => {
            acc(*a, g.clone());
            acc(*b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            acc(*a, g.zip_map(val(*b), "mul", |x, y| x * y)?);
            acc(*b, g.zip_map(val(*a), "mul", |x, y| x * y)?);
        }
        Op::Div(a, b) => {
            let bv = val(*b);
            acc(*a, g.zip_map(bv, "div", |x, y| x / y)?);
            let t = g.zip_map(out, "div", |x, o| x * o)?;
            acc(*b, t.zip_map(bv, "div", |x, y| -x / y)?);
        }
        Op::Neg(a) => acc(*a, g.map(|x| -x)),
        Op::Scale(a, c) => {
            let c = *c;
            acc(*a, g.map(|x| x * c));
        }
        Op::AddScalar(a) => acc(*a, g.clone()),
        Op::Exp(a) => acc(*a, g.zip_map(out, "exp", |x, o| x * o)?),
        Op::Ln(a) => acc(*a, g.zip_map(val(*a), "ln", |x, v| x / v)?),
        Op::Relu(a) => acc(
            *a,
            g.zip_map(val(*a), "relu", |x, v| if v > T::zero() { x } else { T::zero() })?,
        ),
        Op::Tanh(a) => acc(*a, g.zip_map(out, "tanh", |x, o| x * (T::one() - o * o))?),
        Op::Sigmoid(a) => acc(*a, g.zip_map(out, "sigmoid", |x, o| x * o * (T::one() - o))?),
        Op::Softplus(a) => acc(
            *a,
            g.zip_map(val(*a), "softplus", |x, v| x / (T::one() + (-v).exp()))?,
        ),
        Op::Square(a) => acc(*a, g.zip_map(val(*a), "square", |x, v| T::lit(2.0) * x * v)?),
        Op::Sqrt(a) => acc(*a, g.zip_map(out, "sqrt", |x, o| x / (T::lit(2.0) * o))?),
        Op::Clamp(a, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            acc(
                *a,
                g.zip_map(val(*a), "clamp", |x, v| {
                    if v >= lo && v <= hi {
                        x
                    } else {
                        T::zero()
                    }
                })?,
            )
        }
        Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
        Op::Expand(a) => acc(*a, Tensor::full(val(*a).shape(), g.sum())),
        Op::SumAxis(a, axis) => {
            let (r, c) = val(*a).dims2("sum_axis")?;
            let gd = g.data();
            let mut t = Tensor::zeros(&[r, c]);
            for i in 0..r {
                for j in 0..c {
                    t[[i, j]] = if *axis == 0 { gd[j] } else { gd[i] };
                }
            }
            acc(*a, t);
        }
        Op::MatMul(a, b) => {
            acc(*a, g.matmul_t(val(*b))?);
            acc(*b, val(*a).tmatmul(g)?);
        }
        Op::Transpose(a) => acc(*a, g.transpose()?),
        Op::RowScale(a, v) => {
            let (av, vv) = (val(*a), val(*v));
            let (r, c) = av.dims2("row_scale")?;
            let mut ga = g.clone();
            let mut gv = vec![T::zero(); r];
            for i in 0..r {
                let s = vv.data()[i];
                for j in 0..c {
                    gv[i] += g[[i, j]] * av[[i, j]];
                    ga[[i, j]] *= s;
                }
            }
            acc(*a, ga);
            acc(*v, Tensor::new(vv.shape().to_vec(), gv)?);
        }
        Op::AddRow(a, v) => {
            let (r, c) = g.dims2("add_row")?;
            let mut gv = vec![T::zero(); c];
            for i in 0..r {
                for j in 0..c {
                    gv[j] += g[[i, j]];
                }
            }
            acc(*a, g.clone());
            acc(*v, Tensor::new(val(*v).shape().to_vec(), gv)?);
        }
        Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape())?),
        Op::Concat(parts, axis) => {
            let mut offset = 0;
            for &p in parts {
                let shape = val(p).shape().to_vec();
                let len = if shape.len() == 1 { shape[0] } else { shape[*axis] };
                acc(p, narrow_tensor(g, *axis, offset, len)?);
                offset += len;
            }
        }
        Op::Narrow(a, axis, start) => {
            let pv = val(*a);
            let mut t = Tensor::zeros(pv.shape());
            scatter_narrow(&mut t, g, *axis, *start)?;
            acc(*a, t);
        }
        Op::IndexRows(a, idx) => {
            let pv = val(*a);
            let (_, c) = pv.dims2("index_rows")?;
            let mut t = Tensor::zeros(pv.shape());
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    t[[i, j]] += g[[k, j]];
                }
            }
            acc(*a, t);
        }
        Op::Cholesky(a) => {
            // Ā = sym(L⁻ᵀ Φ(Lᵀ L̄) L⁻¹), Φ = lower triangle with halved diagonal
            let l = out;
            let lbar = tril(g.clone());
            let mut p = tril(l.tmatmul(&lbar)?);
            let n = p.shape()[0];
            for i in 0..n {
                p[[i, i]] = p[[i, i]] * T::lit(0.5);
            }
            let x = linalg::tri_solve(l, &p, true)?;
            let s = linalg::tri_solve(l, &x.transpose()?, true)?.transpose()?;
            let st = s.transpose()?;
            acc(*a, s.zip_map(&st, "cholesky", |u, v| T::lit(0.5) * (u + v))?);
        }
        Op::TriSolve(l, b, transpose) => {
            let lv = val(*l);
            let bbar = linalg::tri_solve(lv, g, !*transpose)?;
            let lbar = if *transpose {
                out.matmul_t(&bbar)?
            } else {
                bbar.matmul_t(out)?
            };
            acc(*l, tril(lbar.map(|x| -x)));
            acc(*b, bbar);
        }
        Op::Conv(x, k) => {
            let (gx, gk) = conv::conv_backward(val(*x), val(*k), g)?;
            acc(*x, gx);
            acc(*k, gk);
        }
        Op::ChannelBias(x, b) => {
            let c = val(*b).len();
            let per = g.len() / c.max(1);
            let gb: Vec<T> = (0..c)
                .map(|ch| g.data()[ch * per..(ch + 1) * per].iter().copied().sum())
                .collect();
            acc(*x, g.clone());
            acc(*b, Tensor::new(val(*b).shape().to_vec(), gb)?);
        }
        Op::LogSumExp(a) => {
            let o = out.item();
            let gi = g.item();
            acc(*a, val(*a).map(|v| gi * (v - o).exp()));
        }
        Op::Diag(a) => {
            let n = g.len();
            let mut t = Tensor::zeros(&[n, n]);
            for i in 0..n {
                t[[i, i]] = g.data()[i];
            }
            acc(*a, t);
        }
    }
    Ok(())
}

fn narrow_tensor<T: Scalar>(t: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    match (t.rank(), axis) {
        (1, 0) => Ok(Tensor::from_vec(t.data()[start..start + len].to_vec())),
        (2, 0) => {
            let (_, c) = t.dims2("narrow")?;
            Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec())
        }
        (2, 1) => {
            let (r, c) = t.dims2("narrow")?;
            let mut d = Vec::with_capacity(r * len);
            for i in 0..r {
                d.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
            }
            Tensor::new(vec![r, len], d)
        }
        (rank, axis) => Err(dim_err("narrow", format!("unsupported rank {rank} / axis {axis}"))),
    }
}

fn scatter_narrow<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, axis: usize, start: usize) -> Result<()> {
    match (dst.rank(), axis) {
        (1, 0) => {
            dst.data_mut()[start..start + src.len()].copy_from_slice(src.data());
        }
        (2, 0) => {
            let (_, c) = dst.dims2("narrow")?;
            dst.data_mut()[start * c..start * c + src.len()].copy_from_slice(src.data());
        }
        (2, 1) => {
            let (r, c) = dst.dims2("narrow")?;
            let len = src.shape()[1];
            for i in 0..r {
                dst.data_mut()[i * c + start..i * c + start + len]
                    .copy_from_slice(&src.data()[i * len..(i + 1) * len]);
            }
        }
        (rank, axis) => return Err(dim_err("narrow", format!("unsupported rank {rank} / axis {axis}"))),
    }
    Ok(())
}

/// Elementwise activation applied between network layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            "identity" => Ok(Self::Identity),
            other => Err(Error::Contract(format!("unknown activation {other:?}"))),
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.tracked(self.id)
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Self {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(self, other: Self, value: Tensor<T>, op: Op<T>) -> Self {
        let tracked = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, tracked)
    }

    fn check_finite(value: &Tensor<T>, op: &'static str) -> Result<()> {
        if value.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn add(self, other: Self) -> Result<Self> {
        let v = self.value().zip_map(&other.value(), "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        let v = self.value().zip_map(&other.value(), "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        let v = self.value().zip_map(&other.value(), "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn div(self, other: Self) -> Result<Self> {
        let v = self.value().zip_map(&other.value(), "div", |a, b| a / b)?;
        Self::check_finite(&v, "div")?;
        Ok(self.binary(other, v, Op::Div(self.id, other.id)))
    }

    pub fn neg(self) -> Self {
        let v = self.value().map(|x| -x);
        self.unary(v, Op::Neg(self.id))
    }

    pub fn scale(self, c: T) -> Self {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: T) -> Self {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn exp(self) -> Result<Self> {
        let v = self.value().map(|x| x.exp());
        Self::check_finite(&v, "exp")?;
        Ok(self.unary(v, Op::Exp(self.id)))
    }

    pub fn ln(self) -> Result<Self> {
        let v = self.value().map(|x| x.ln());
        Self::check_finite(&v, "ln")?;
        Ok(self.unary(v, Op::Ln(self.id)))
    }

    pub fn relu(self) -> Self {
        let v = self.value().map(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(v, Op::Relu(self.id))
    }

    pub fn tanh(self) -> Self {
        let v = self.value().map(|x| x.tanh());
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Self {
        let v = self.value().map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(self) -> Self {
        let v = self.value().map(softplus);
        self.unary(v, Op::Softplus(self.id))
    }

    /// `ln σ(x) = −softplus(−x)`.
    pub fn log_sigmoid(self) -> Self {
        self.neg().softplus().neg()
    }

    pub fn square(self) -> Self {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    pub fn sqrt(self) -> Result<Self> {
        let v = self.value().map(|x| x.sqrt());
        Self::check_finite(&v, "sqrt")?;
        Ok(self.unary(v, Op::Sqrt(self.id)))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(self, lo: T, hi: T) -> Self {
        let v = self.value().map(|x| x.max(lo).min(hi));
        self.unary(v, Op::Clamp(self.id, lo, hi))
    }

    pub fn activation(self, kind: Activation) -> Self {
        match kind {
            Activation::Relu => self.relu(),
            Activation::Tanh => self.tanh(),
            Activation::Identity => self,
        }
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(self) -> Self {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Self {
        let n = self.len().max(1);
        self.sum().scale(T::one() / T::lit(n as f64))
    }

    /// Sums a matrix over `axis` (0: down columns → `[C]`, 1: across rows → `[R]`).
    pub fn sum_axis(self, axis: usize) -> Result<Self> {
        let val = self.value();
        let (r, c) = val.dims2("sum_axis")?;
        let out: Vec<T> = if axis == 0 {
            (0..c).map(|j| (0..r).map(|i| val[[i, j]]).sum()).collect()
        } else {
            (0..r).map(|i| (0..c).map(|j| val[[i, j]]).sum()).collect()
        };
        Ok(self.unary(Tensor::from_vec(out), Op::SumAxis(self.id, axis)))
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(self) -> Result<Self> {
        let v = self.value().transpose()?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    /// Multiplies row `i` of a matrix by `scales[i]`.
    pub fn row_scale(self, scales: Self) -> Result<Self> {
        let a = self.value();
        let s = scales.value();
        let (r, c) = a.dims2("row_scale")?;
        if s.len() != r {
            return Err(dim_err("row_scale", format!("{r} rows, {} scales", s.len())));
        }
        let mut out = (*a).clone();
        for i in 0..r {
            for j in 0..c {
                out[[i, j]] *= s.data()[i];
            }
        }
        Ok(self.binary(scales, out, Op::RowScale(self.id, scales.id)))
    }

    /// Adds a `[C]` row vector to every row of an `[R, C]` matrix.
    pub fn add_row(self, row: Self) -> Result<Self> {
        let a = self.value();
        let v = row.value();
        let (r, c) = a.dims2("add_row")?;
        if v.len() != c {
            return Err(dim_err("add_row", format!("{c} columns, row of {}", v.len())));
        }
        let mut out = (*a).clone();
        for i in 0..r {
            for j in 0..c {
                out[[i, j]] += v.data()[j];
            }
        }
        Ok(self.binary(row, out, Op::AddRow(self.id, row.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Column vector `[n, 1]` from any tensor with `n` entries.
    pub fn as_column(self) -> Result<Self> {
        let n = self.len();
        self.reshape(&[n, 1])
    }

    /// Concatenates 1-D tensors (axis 0) or matrices along `axis`.
    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err("concat", "no parts"))?;
        let tape = first.tape;
        let vals: Vec<Rc<Tensor<T>>> = parts.iter().map(Var::value).collect();
        let rank = vals[0].rank();
        let value = match (rank, axis) {
            (1, 0) => Tensor::from_vec(vals.iter().flat_map(|v| v.data().iter().copied()).collect()),
            (2, 0) => {
                let c = vals[0].shape()[1];
                let mut rows = 0;
                let mut data = Vec::new();
                for v in &vals {
                    let (r, vc) = v.dims2("concat")?;
                    if vc != c {
                        return Err(dim_err("concat", format!("column counts {c} vs {vc}")));
                    }
                    rows += r;
                    data.extend_from_slice(v.data());
                }
                Tensor::new(vec![rows, c], data)?
            }
            (2, 1) => {
                let r = vals[0].shape()[0];
                let mut cols = 0;
                for v in &vals {
                    let (vr, vc) = v.dims2("concat")?;
                    if vr != r {
                        return Err(dim_err("concat", format!("row counts {r} vs {vr}")));
                    }
                    cols += vc;
                }
                let mut data = Vec::with_capacity(r * cols);
                for i in 0..r {
                    for v in &vals {
                        let vc = v.shape()[1];
                        data.extend_from_slice(&v.data()[i * vc..(i + 1) * vc]);
                    }
                }
                Tensor::new(vec![r, cols], data)?
            }
            (rank, axis) => {
                return Err(dim_err("concat", format!("unsupported rank {rank} / axis {axis}")))
            }
        };
        if vals.iter().any(|v| v.rank() != rank) {
            return Err(dim_err("concat", "mixed ranks"));
        }
        let tracked = parts.iter().any(Var::requires_grad);
        Ok(tape.push(value, Op::Concat(parts.iter().map(|p| p.id).collect(), axis), tracked))
    }

    /// Appends a constant-one column: `[N, D] → [N, D+1]` (bias folding).
    pub fn append_ones(self) -> Result<Self> {
        let (r, _) = self.value().dims2("append_ones")?;
        let ones = self.tape.ones(&[r, 1]);
        Self::concat(&[self, ones], 1)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let val = self.value();
        let extent = val.shape().get(axis).copied().unwrap_or(0);
        if start + len > extent {
            return Err(dim_err(
                "narrow",
                format!("range {start}..{} exceeds extent {extent}", start + len),
            ));
        }
        let v = narrow_tensor(&val, axis, start, len)?;
        Ok(self.unary(v, Op::Narrow(self.id, axis, start)))
    }

    /// Column `j` of a matrix as a 1-D tensor.
    pub fn column(self, j: usize) -> Result<Self> {
        let (r, _) = self.value().dims2("column")?;
        self.narrow(1, j, 1)?.reshape(&[r])
    }

    /// Gathers rows by index (rows may repeat).
    pub fn index_rows(self, idx: &[usize]) -> Result<Self> {
        let val = self.value();
        let (r, c) = val.dims2("index_rows")?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(dim_err("index_rows", format!("row {i} out of {r}")));
            }
            data.extend_from_slice(&val.data()[i * c..(i + 1) * c]);
        }
        let v = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.unary(v, Op::IndexRows(self.id, idx.to_vec())))
    }

    /// Broadcasts a single-element var to `shape`.
    pub fn expand(self, shape: &[usize]) -> Result<Self> {
        if self.len() != 1 {
            return Err(dim_err("expand", format!("expected one element, got {:?}", self.shape())));
        }
        let v = Tensor::full(shape, self.item());
        Ok(self.unary(v, Op::Expand(self.id)))
    }

    /// Lower-triangular Cholesky factor; differentiable.
    pub fn cholesky(self) -> Result<Self> {
        let l = linalg::cholesky(&self.value())?;
        Ok(self.unary(l, Op::Cholesky(self.id)))
    }

    /// Cholesky with escalating diagonal jitter on failure.
    pub fn cholesky_jittered(self) -> Result<Self> {
        match self.cholesky() {
            Ok(l) => Ok(l),
            Err(Error::NotPositiveDefinite { .. }) => {
                let mut last = None;
                for jitter in linalg::jitter_schedule(&self.value()) {
                    let n = self.shape()[0];
                    let shifted = self.add(self.tape.constant(Tensor::eye(n).map(|x| x * jitter)))?;
                    match shifted.cholesky() {
                        Ok(l) => return Ok(l),
                        Err(e) => last = Some(e),
                    }
                }
                Err(last.expect("non-empty jitter schedule"))
            }
            Err(e) => Err(e),
        }
    }

    /// Solves `L·X = B` (`Lᵀ·X = B` when `transpose`) with `self = L` lower-triangular.
    pub fn tri_solve(self, b: Self, transpose: bool) -> Result<Self> {
        let x = linalg::tri_solve(&self.value(), &b.value(), transpose)?;
        Self::check_finite(&x, "tri_solve")?;
        Ok(self.binary(b, x, Op::TriSolve(self.id, b.id, transpose)))
    }

    /// Solves `A·X = B` for symmetric positive-definite `A = self`.
    pub fn solve_psd(self, b: Self) -> Result<Self> {
        let l = self.cholesky_jittered()?;
        let z = l.tri_solve(b, false)?;
        l.tri_solve(z, true)
    }

    /// Same-padded 2-D cross-correlation of `[C_in,H,W]` with `[C_out,C_in,k,k]`.
    pub fn conv2d(self, kernels: Self) -> Result<Self> {
        let v = conv::conv_forward(&self.value(), &kernels.value())?;
        Ok(self.binary(kernels, v, Op::Conv(self.id, kernels.id)))
    }

    /// Same-padded 1-D cross-correlation of `[C_in,L]` with `[C_out,C_in,k]`.
    pub fn conv1d(self, kernels: Self) -> Result<Self> {
        let (c, l) = self.value().dims2("conv1d")?;
        let ks = kernels.shape();
        let [o, ci, k] = ks[..] else {
            return Err(dim_err("conv1d", format!("kernels must be [Co,Ci,K], got {ks:?}")));
        };
        let x = self.reshape(&[c, 1, l])?;
        let kk = kernels.reshape(&[o, ci, 1, k])?;
        x.conv2d(kk)?.reshape(&[o, l])
    }

    /// Adds `bias[c]` to every entry of channel `c` (leading axis).
    pub fn add_channel_bias(self, bias: Self) -> Result<Self> {
        let x = self.value();
        let b = bias.value();
        let c = x.shape().first().copied().unwrap_or(0);
        if b.len() != c {
            return Err(dim_err("channel_bias", format!("{c} channels, {} biases", b.len())));
        }
        let per = x.len() / c.max(1);
        let mut out = (*x).clone();
        for (ch, chunk) in out.data_mut().chunks_mut(per.max(1)).enumerate().take(c) {
            for v in chunk {
                *v += b.data()[ch];
            }
        }
        Ok(self.binary(bias, out, Op::ChannelBias(self.id, bias.id)))
    }

    /// `ln Σ exp(xᵢ)` over all entries, as a scalar.
    pub fn logsumexp(self) -> Result<Self> {
        let val = self.value();
        let m = val.data().iter().copied().fold(T::neg_infinity(), T::max);
        if !m.is_finite() {
            return Err(Error::NonFinite { op: "logsumexp" });
        }
        let s: T = val.data().iter().map(|&x| (x - m).exp()).sum();
        Ok(self.unary(Tensor::scalar(m + s.ln()), Op::LogSumExp(self.id)))
    }

    /// Diagonal of a square matrix.
    pub fn diag(self) -> Result<Self> {
        let val = self.value();
        let (r, c) = val.dims2("diag")?;
        if r != c {
            return Err(dim_err("diag", format!("non-square [{r}x{c}]")));
        }
        let v = Tensor::from_vec((0..r).map(|i| val[[i, i]]).collect());
        Ok(self.unary(v, Op::Diag(self.id)))
    }

    /// Scales every entry by a single-element var.
    pub fn scale_by(self, s: Self) -> Result<Self> {
        let e = s.expand(&self.shape())?;
        self.mul(e)
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::lit(30.0) {
        x
    } else if x < T::lit(-30.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type F = for<'t> fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>;

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    fn eval(f: F, inputs: &[Tensor<f64>]) -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        f(&vars).unwrap().item()
    }

    /// Central finite differences (h = 1e-5) against the reverse sweep.
    fn check(f: F, inputs: &[Tensor<f64>], rtol: f64) {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let loss = f(&vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[k]);
            for i in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let numeric = (eval(f, &plus) - eval(f, &minus)) / (2.0 * h);
                let a = analytic.data()[i];
                assert!(
                    (a - numeric).abs() <= rtol * a.abs().max(numeric.abs()) + 1e-7,
                    "input {k} entry {i}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    fn mat(r: usize, c: usize, seed: u64) -> Tensor<f64> {
        Tensor::<f64>::from_f64(vec![r, c], &pseudo(r * c, seed)).unwrap()
    }

    fn spd(n: usize, seed: u64) -> Tensor<f64> {
        let m = mat(n, n, seed);
        let mut a = m.matmul_t(&m).unwrap();
        for i in 0..n {
            a[[i, i]] += 1.0;
        }
        a
    }

    #[test]
    fn square_gradient_is_analytic() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        let g = tape.backward(x.square()).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn detached_input_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.var(Tensor::from_vec(vec![3.0, 4.0]));
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.wrt(x), Tensor::zeros(&[2]));
    }

    #[test]
    fn second_backward_is_rejected() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(1.0));
        let loss = x.square();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeReused)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.var(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn exp_overflow_is_an_error() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(1e4));
        assert!(matches!(x.exp(), Err(Error::NonFinite { .. })));
        assert!(tape.scalar(-1.0).ln().is_err());
    }

    #[test]
    fn activations_at_reference_points() {
        let tape = Tape::new();
        let x = tape.var(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        assert_eq!(x.activation(Activation::Relu).value().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(x.activation(Activation::Tanh).value().data()[1], 0.0);
        let g = tape.backward(x.relu().sum()).unwrap();
        // subgradient at the kink is zero
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn grad_sum_of_matmul() {
        for seed in 0..20 {
            check(|v| Ok(v[0].matmul(v[1])?.sum()), &[mat(3, 4, seed), mat(4, 2, seed + 100)], 1e-4);
        }
    }

    #[test]
    fn grad_elementwise_ops() {
        for seed in 0..20 {
            let a = mat(2, 3, seed);
            let b = mat(2, 3, seed + 50).map(|x| x + 2.5);
            check(|v| Ok(v[0].mul(v[1])?.add(v[0])?.sub(v[1].scale(0.3))?.sum()), &[a.clone(), b.clone()], 1e-4);
            check(|v| Ok(v[0].div(v[1])?.square().sum()), &[a.clone(), b.clone()], 1e-4);
            check(|v| Ok(v[0].exp()?.add(v[1].ln()?)?.sum()), &[a.clone(), b.clone()], 1e-4);
            check(|v| Ok(v[0].tanh().mul(v[0].sigmoid())?.sum()), &[a.clone()], 1e-4);
            check(|v| Ok(v[0].softplus().add(v[0].log_sigmoid())?.neg().sum()), &[a.clone()], 1e-4);
            check(|v| Ok(v[0].sqrt()?.add_scalar(1.0).mean()), &[b.clone()], 1e-4);
            check(|v| Ok(v[0].clamp(-0.5, 0.5).square().sum()), &[a.clone()], 1e-4);
            check(|v| Ok(v[0].relu().mul(v[1])?.sum()), &[a.clone(), b.clone()], 1e-4);
        }
    }

    #[test]
    fn grad_structural_ops() {
        for seed in 0..20 {
            let a = mat(3, 4, seed);
            let r = Tensor::<f64>::from_f64(vec![3], &pseudo(3, seed + 7)).unwrap();
            let c = Tensor::<f64>::from_f64(vec![4], &pseudo(4, seed + 9)).unwrap();
            check(|v| Ok(v[0].transpose()?.square().sum_axis(0)?.square().sum()), &[a.clone()], 1e-4);
            check(|v| Ok(v[0].row_scale(v[1])?.add_row(v[2])?.square().sum()), &[a.clone(), r.clone(), c.clone()], 1e-4);
            check(|v| Ok(v[0].sum_axis(1)?.mul(v[1])?.sum()), &[a.clone(), r.clone()], 1e-4);
            check(
                |v| {
                    let cat = Var::concat(&[v[0], v[0].narrow(1, 1, 2)?], 1)?;
                    let rows = Var::concat(&[cat, cat.index_rows(&[2, 0, 2])?], 0)?;
                    Ok(rows.append_ones()?.square().sum())
                },
                &[a.clone()],
                1e-4,
            );
            check(|v| Ok(v[0].reshape(&[12])?.mul(v[0].reshape(&[12])?)?.sum()), &[a.clone()], 1e-4);
            check(|v| Ok(v[0].logsumexp()?.add(v[1].sum().scale_by(v[1].narrow(0, 0, 1)?)?.sum())?), &[a.clone(), c.clone()], 1e-4);
            check(|v| Ok(v[0].matmul_square_diag()), &[mat(3, 3, seed + 3)], 1e-4);
            check(|v| Ok(v[0].column(2)?.square().sum()), &[a.clone()], 1e-4);
        }
    }

    impl<'t> Var<'t, f64> {
        fn matmul_square_diag(self) -> Var<'t, f64> {
            self.matmul(self).unwrap().diag().unwrap().square().sum()
        }
    }

    /// Cholesky reads one triangle, so the adjoint is the symmetric split;
    /// symmetrising the input first makes entrywise differences comparable.
    fn sym<'t>(a: Var<'t, f64>) -> Result<Var<'t, f64>> {
        Ok(a.add(a.transpose()?)?.scale(0.5))
    }

    #[test]
    fn grad_cholesky_and_solves() {
        for seed in 0..20 {
            let a = spd(3, seed);
            let b = mat(3, 2, seed + 30);
            check(|v| { let l = sym(v[0])?.cholesky()?; Ok(l.mul(l.add_scalar(0.5))?.sum()) }, &[a.clone()], 1e-4);
            check(|v| Ok(sym(v[0])?.cholesky()?.diag()?.ln()?.sum()), &[a.clone()], 1e-4);
            check(|v| Ok(sym(v[0])?.cholesky()?.tri_solve(v[1], false)?.square().sum()), &[a.clone(), b.clone()], 1e-4);
            check(|v| Ok(sym(v[0])?.cholesky()?.tri_solve(v[1], true)?.square().sum()), &[a.clone(), b.clone()], 1e-4);
            check(|v| Ok(sym(v[0])?.solve_psd(v[1])?.sum()), &[a.clone(), b.clone()], 1e-4);
        }
    }

    #[test]
    fn tri_solve_gradient_on_raw_factor() {
        for seed in 0..20 {
            let mut l = linalg::cholesky(&spd(3, seed)).unwrap();
            l[[0, 2]] = 0.0;
            let b = mat(3, 2, seed + 60);
            check(|v| Ok(v[0].tri_solve(v[1], false)?.square().sum()), &[l.clone(), b.clone()], 1e-4);
            check(|v| Ok(v[0].tri_solve(v[1], true)?.square().sum()), &[l, b], 1e-4);
        }
    }

    #[test]
    fn grad_convolutions() {
        for seed in 0..20 {
            let x = Tensor::<f64>::from_f64(vec![2, 4, 5], &pseudo(40, seed)).unwrap();
            let k = Tensor::<f64>::from_f64(vec![3, 2, 3, 3], &pseudo(54, seed + 1)).unwrap();
            let b = Tensor::<f64>::from_f64(vec![3], &pseudo(3, seed + 2)).unwrap();
            check(|v| Ok(v[0].conv2d(v[1])?.add_channel_bias(v[2])?.tanh().sum()), &[x, k, b], 1e-4);
            let x = Tensor::<f64>::from_f64(vec![2, 9], &pseudo(18, seed + 3)).unwrap();
            let k = Tensor::<f64>::from_f64(vec![2, 2, 5], &pseudo(20, seed + 4)).unwrap();
            check(|v| Ok(v[0].conv1d(v[1])?.square().sum()), &[x, k], 1e-4);
        }
    }

    #[test]
    fn jittered_cholesky_recovers_rank_deficient_input() {
        let tape = Tape::new();
        let a = tape.var(Tensor::<f64>::from_f64(vec![2, 2], &[1.0, 1.0, 1.0, 1.0]).unwrap());
        let l = a.cholesky_jittered().unwrap();
        assert!(l.value().all_finite());
    }
}
