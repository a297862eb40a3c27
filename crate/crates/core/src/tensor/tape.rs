//! Reverse-mode differentiation tape.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order; `backward` walks it once in reverse.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::conv::{self, ConvGeom};
use super::kernels::{self, AttnDims, NormLayout};
use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Primitive identity, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddBias,
    Affine,
    Matmul,
    Permute,
    Reshape,
    Concat,
    Narrow,
    Softmax,
    LogSoftmax,
    Gelu,
    Relu,
    LayerNorm,
    GroupNorm,
    Conv2d,
    ConvTranspose2d,
    AvgPool,
    Upsample,
    Attention,
    SumLast,
    SumAll,
    MeanAll,
}

impl OpKind {
    pub const ALL: [OpKind; 26] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::AddBias,
        OpKind::Affine,
        OpKind::Matmul,
        OpKind::Permute,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::Gelu,
        OpKind::Relu,
        OpKind::LayerNorm,
        OpKind::GroupNorm,
        OpKind::Conv2d,
        OpKind::ConvTranspose2d,
        OpKind::AvgPool,
        OpKind::Upsample,
        OpKind::Attention,
        OpKind::SumLast,
        OpKind::SumAll,
        OpKind::MeanAll,
    ];

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::AddBias => "add_bias",
            OpKind::Affine => "affine",
            OpKind::Matmul => "matmul",
            OpKind::Permute => "permute",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::GroupNorm => "group_norm",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv_transpose2d",
            OpKind::AvgPool => "avg_pool",
            OpKind::Upsample => "upsample_nearest",
            OpKind::Attention => "attention",
            OpKind::SumLast => "sum_last",
            OpKind::SumAll => "sum_all",
            OpKind::MeanAll => "mean_all",
        }
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddBias(usize, usize),
    Affine(usize, T),
    Matmul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Narrow { x: usize, axis: usize, start: usize },
    Softmax(usize),
    LogSoftmax(usize),
    Gelu(usize),
    Relu(usize),
    Norm { x: usize, gamma: usize, beta: usize, layout: NormLayout, xhat: Vec<T>, rstd: Vec<T>, group: bool },
    Conv { x: usize, w: usize, b: Option<usize>, geom: ConvGeom, transposed: bool },
    AvgPool(usize, usize),
    Upsample(usize, usize),
    Attention { q: usize, k: usize, v: usize, scale: T, dims: AttnDims, probs: Vec<T> },
    SumLast(usize),
    SumAll(usize),
    MeanAll(usize),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Affine(..) => OpKind::Affine,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Permute(..) => OpKind::Permute,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Concat(..) => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Relu(..) => OpKind::Relu,
            Op::Norm { group: false, .. } => OpKind::LayerNorm,
            Op::Norm { group: true, .. } => OpKind::GroupNorm,
            Op::Conv { transposed: false, .. } => OpKind::Conv2d,
            Op::Conv { transposed: true, .. } => OpKind::ConvTranspose2d,
            Op::AvgPool(..) => OpKind::AvgPool,
            Op::Upsample(..) => OpKind::Upsample,
            Op::Attention { .. } => OpKind::Attention,
            Op::SumLast(..) => OpKind::SumLast,
            Op::SumAll(..) => OpKind::SumAll,
            Op::MeanAll(..) => OpKind::MeanAll,
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive applications for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Option<Vec<Option<Vec<T>>>>>,
    fault: Cell<Option<OpKind>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a tape node.
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

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grads: RefCell::new(None), fault: Cell::new(None) }
    }

    /// Trainable input: receives a gradient on `backward`.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Test hook: flips the sign of every gradient flowing through ops of
    /// this kind during `backward`.
    pub fn inject_fault(&self, kind: Option<OpKind>) {
        self.fault.set(kind);
    }

    fn push_node(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Result<Var<'_, T>> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(op.kind().name().to_string()));
        }
        let rg = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push_node(value, op, rg))
    }

    fn val(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Gradient of the last `backward` call with respect to `v`. `None` when
    /// `v` is detached or unreached.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        let grads = self.grads.borrow();
        let g = grads.as_ref()?.get(v.id)?.as_ref()?;
        let shape = self.nodes.borrow()[v.id].value.shape().to_vec();
        Some(Tensor::new(&shape, g.clone()).expect("gradient shape matches value"))
    }

    /// Populates gradients for every leaf reachable from `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        if self.grads.borrow().is_some() {
            return Err(Error::Backward("backward already ran on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Backward(format!("loss must be a scalar, got shape {:?}", nodes[loss.id].value.shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        let fault = self.fault.get();
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[id].take() else { continue };
            if fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            backprop(&nodes, id, &g, &mut grads);
        }
        // only leaf gradients are kept
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[id] = None;
            }
        }
        drop(nodes);
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }
}

fn buf<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize) -> Option<&'g mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize, f: impl Fn(usize) -> T) {
    if let Some(b) = buf(grads, nodes, id) {
        for (i, v) in b.iter_mut().enumerate() {
            *v += f(i);
        }
    }
}

/// Two mutable gradient buffers for distinct ids, or one when they coincide.
fn take_buf<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize) -> Option<Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.numel();
    Some(grads[id].take().unwrap_or_else(|| vec![T::zero(); len]))
}

fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let v = |i: usize| -> &Tensor<T> { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(grads, nodes, *a, |i| g[i]);
            acc(grads, nodes, *b, |i| g[i]);
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, |i| g[i]);
            acc(grads, nodes, *b, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (v(*a).data(), v(*b).data());
            acc(grads, nodes, *a, |i| g[i] * bv[i]);
            acc(grads, nodes, *b, |i| g[i] * av[i]);
        }
        Op::Div(a, b) => {
            let (av, bv) = (v(*a).data(), v(*b).data());
            acc(grads, nodes, *a, |i| g[i] / bv[i]);
            acc(grads, nodes, *b, |i| -g[i] * av[i] / (bv[i] * bv[i]));
        }
        Op::AddBias(x, b) => {
            acc(grads, nodes, *x, |i| g[i]);
            if let Some(bb) = buf(grads, nodes, *b) {
                let c = bb.len();
                for row in g.chunks_exact(c) {
                    for (d, &gv) in bb.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
            }
        }
        Op::Affine(x, m) => acc(grads, nodes, *x, |i| g[i] * *m),
        Op::Matmul(a, b) => {
            let (at, bt) = (v(*a), v(*b));
            let plan = kernels::matmul_plan(at.shape(), bt.shape()).expect("validated in forward");
            let (m, k, n) = (plan.m, plan.k, plan.n);
            if let Some(mut da) = take_buf(grads, nodes, *a) {
                for (bi, (&ao, &bo)) in plan.a_off.iter().zip(&plan.b_off).enumerate() {
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    // dA += dC · B^T
                    T::gemm(m, n, k, T::one(), gb, n as isize, 1, &bt.data()[bo..bo + k * n], 1, n as isize, T::one(), &mut da[ao..ao + m * k], k as isize, 1);
                }
                grads[*a] = Some(da);
            }
            if let Some(mut db) = take_buf(grads, nodes, *b) {
                for (bi, (&ao, &bo)) in plan.a_off.iter().zip(&plan.b_off).enumerate() {
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    // dB += A^T · dC
                    T::gemm(k, m, n, T::one(), &at.data()[ao..ao + m * k], 1, k as isize, gb, n as isize, 1, T::one(), &mut db[bo..bo + k * n], n as isize, 1);
                }
                grads[*b] = Some(db);
            }
        }
        Op::Permute(x, perm) => {
            if let Some(dx) = buf(grads, nodes, *x) {
                let out_shape = nodes[id].value.shape();
                let inv = kernels::inverse_perm(perm);
                let mut tmp = vec![T::zero(); g.len()];
                kernels::permute_slice(g, out_shape, &inv, &mut tmp);
                for (d, t) in dx.iter_mut().zip(tmp) {
                    *d += t;
                }
            }
        }
        Op::Reshape(x) => acc(grads, nodes, *x, |i| g[i]),
        Op::Concat(parts, axis) => {
            let out_shape = nodes[id].value.shape();
            let outer = numel(&out_shape[..*axis]);
            let inner = numel(&out_shape[axis + 1..]);
            let total = out_shape[*axis];
            let mut off = 0;
            for &p in parts {
                let len = v(p).shape()[*axis];
                if let Some(dp) = buf(grads, nodes, p) {
                    for o in 0..outer {
                        let src = &g[(o * total + off) * inner..(o * total + off + len) * inner];
                        let dst = &mut dp[o * len * inner..(o + 1) * len * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                off += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let in_shape = v(*x).shape().to_vec();
            let len = nodes[id].value.shape()[*axis];
            if let Some(dx) = buf(grads, nodes, *x) {
                let outer = numel(&in_shape[..*axis]);
                let inner = numel(&in_shape[axis + 1..]);
                let total = in_shape[*axis];
                for o in 0..outer {
                    let dst = &mut dx[(o * total + start) * inner..(o * total + start + len) * inner];
                    for (d, &s) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                        *d += s;
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let y = nodes[id].value.data();
            let w = *nodes[id].value.shape().last().unwrap();
            if let Some(dx) = buf(grads, nodes, *x) {
                kernels::softmax_rows_backward(y, g, w, dx);
            }
        }
        Op::LogSoftmax(x) => {
            let y = nodes[id].value.data();
            let w = *nodes[id].value.shape().last().unwrap();
            if let Some(dx) = buf(grads, nodes, *x) {
                kernels::log_softmax_rows_backward(y, g, w, dx);
            }
        }
        Op::Gelu(x) => {
            let xv = v(*x).data();
            acc(grads, nodes, *x, |i| g[i] * kernels::gelu_grad(xv[i]));
        }
        Op::Relu(x) => {
            let xv = v(*x).data();
            acc(grads, nodes, *x, |i| if xv[i] > T::zero() { g[i] } else { T::zero() });
        }
        Op::Norm { x, gamma, beta, layout, xhat, rstd, .. } => {
            let gam = v(*gamma).data();
            let mut dg = take_buf(grads, nodes, *gamma);
            let mut db = take_buf(grads, nodes, *beta);
            let mut dx = take_buf(grads, nodes, *x);
            kernels::norm_backward(g, gam, xhat, rstd, layout, dx.as_deref_mut(), dg.as_deref_mut(), db.as_deref_mut());
            grads[*gamma] = dg.or(grads[*gamma].take());
            grads[*beta] = db.or(grads[*beta].take());
            grads[*x] = dx.or(grads[*x].take());
        }
        Op::Conv { x, w, b, geom, transposed } => {
            let (xv, wv) = (v(*x).data(), v(*w).data());
            let mut dx = take_buf(grads, nodes, *x);
            let mut dw = take_buf(grads, nodes, *w);
            let mut db = b.and_then(|b| take_buf(grads, nodes, b));
            if *transposed {
                conv::conv_t_backward(xv, wv, g, geom, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
            } else {
                conv::conv2d_backward(xv, wv, g, geom, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
            }
            if dx.is_some() {
                grads[*x] = dx;
            }
            if dw.is_some() {
                grads[*w] = dw;
            }
            if let (Some(b), Some(d)) = (b, db) {
                grads[*b] = Some(d);
            }
        }
        Op::AvgPool(x, k) => {
            let s = v(*x).shape().to_vec();
            if let Some(dx) = buf(grads, nodes, *x) {
                kernels::avg_pool_backward(g, s[0] * s[1], s[2], s[3], *k, dx);
            }
        }
        Op::Upsample(x, f) => {
            let s = v(*x).shape().to_vec();
            if let Some(dx) = buf(grads, nodes, *x) {
                kernels::upsample_nearest_backward(g, s[0] * s[1], s[2], s[3], *f, dx);
            }
        }
        Op::Attention { q, k, v: vv, scale, dims, probs } => {
            let (qd, kd, vd) = (v(*q).data(), v(*k).data(), v(*vv).data());
            let mut dq = take_buf(grads, nodes, *q);
            let mut dk = take_buf(grads, nodes, *k);
            let mut dv = take_buf(grads, nodes, *vv);
            kernels::attention_backward(qd, kd, vd, probs, g, dims, *scale, dq.as_deref_mut(), dk.as_deref_mut(), dv.as_deref_mut());
            if dq.is_some() {
                grads[*q] = dq;
            }
            if dk.is_some() {
                grads[*k] = dk;
            }
            if dv.is_some() {
                grads[*vv] = dv;
            }
        }
        Op::SumLast(x) => {
            let w = *v(*x).shape().last().unwrap();
            acc(grads, nodes, *x, |i| g[i / w]);
        }
        Op::SumAll(x) => acc(grads, nodes, *x, |_| g[0]),
        Op::MeanAll(x) => {
            let n = T::of(v(*x).numel() as f64);
            acc(grads, nodes, *x, |_| g[0] / n);
        }
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        let v = (*self.value()).clone();
        self.tape.constant(v)
    }

    fn check_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars belong to different tapes");
    }

    fn binary(&self, o: &Var<'t, T>, name: &str, f: impl Fn(T, T) -> T, op: fn(usize, usize) -> Op<T>) -> Result<Var<'t, T>> {
        self.check_tape(o);
        let (a, b) = (self.value(), o.value());
        same_shape(&a, &b, name)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(a.shape(), data)?;
        self.tape.push(out, op(self.id, o.id), &[self.id, o.id])
    }

    pub fn add(&self, o: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(o, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, o: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(o, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, o: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(o, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, o: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(o, "div", |x, y| x / y, Op::Div)
    }

    pub fn square(&self) -> Result<Var<'t, T>> {
        self.mul(self)
    }

    /// Adds `bias` (shape `[C]`) along the last axis.
    pub fn add_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(bias);
        let (x, b) = (self.value(), bias.value());
        let c = *x.shape().last().unwrap();
        if b.shape() != [c] {
            return Err(Error::shape(format!("bias {:?} does not match last dim of {:?}", b.shape(), x.shape())));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (d, &bv) in row.iter_mut().zip(b.data()) {
                *d += bv;
            }
        }
        let out = Tensor::new(x.shape(), data)?;
        self.tape.push(out, Op::AddBias(self.id, bias.id), &[self.id, bias.id])
    }

    /// `mul * x + add`.
    pub fn affine(&self, mul: f64, add: f64) -> Result<Var<'t, T>> {
        let (m, a) = (T::of(mul), T::of(add));
        let out = self.value().map(|x| x * m + a);
        self.tape.push(out, Op::Affine(self.id, m), &[self.id])
    }

    pub fn scale(&self, mul: f64) -> Result<Var<'t, T>> {
        self.affine(mul, 0.0)
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]` with broadcast
    /// leading dimensions.
    pub fn matmul(&self, o: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(o);
        let (a, b) = (self.value(), o.value());
        let plan = kernels::matmul_plan(a.shape(), b.shape())?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![T::zero(); numel(&plan.out_shape)];
        for (bi, (&ao, &bo)) in plan.a_off.iter().zip(&plan.b_off).enumerate() {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &a.data()[ao..ao + m * k],
                k as isize,
                1,
                &b.data()[bo..bo + k * n],
                n as isize,
                1,
                T::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
                n as isize,
                1,
            );
        }
        let out = Tensor::new(&plan.out_shape, out)?;
        self.tape.push(out, Op::Matmul(self.id, o.id), &[self.id, o.id])
    }

    /// `x · W + b` with `W: [in, out]`.
    pub fn linear(&self, w: &Var<'t, T>, b: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        let y = self.matmul(w)?;
        match b {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().permute(perm)?;
        self.tape.push(out, Op::Permute(self.id, perm.to_vec()), &[self.id])
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Var<'t, T>> {
        let nd = self.shape().len();
        if a >= nd || b >= nd {
            return Err(Error::shape(format!("transpose axes ({a},{b}) out of range for rank {nd}")));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = (*self.value()).clone().reshape(shape)?;
        self.tape.push(out, Op::Reshape(self.id), &[self.id])
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let tape = first.tape;
        let vals: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let base = vals[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in &vals {
            let s = v.shape();
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape(format!("concat along {axis}: {base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let len = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push(Tensor::new(&shape, data)?, Op::Concat(ids.clone(), axis), &ids)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(format!("narrow({axis}, {start}, {len}) out of range for {s:?}")));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[(o * s[axis] + start) * inner..(o * s[axis] + start + len) * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        self.tape.push(Tensor::new(&shape, data)?, Op::Narrow { x: self.id, axis, start }, &[self.id])
    }

    pub fn softmax(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = *x.shape().last().unwrap();
        let mut out = vec![T::zero(); x.numel()];
        kernels::softmax_rows(x.data(), w, &mut out);
        self.tape.push(Tensor::new(x.shape(), out)?, Op::Softmax(self.id), &[self.id])
    }

    pub fn log_softmax(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = *x.shape().last().unwrap();
        let mut out = vec![T::zero(); x.numel()];
        kernels::log_softmax_rows(x.data(), w, &mut out);
        self.tape.push(Tensor::new(x.shape(), out)?, Op::LogSoftmax(self.id), &[self.id])
    }

    pub fn gelu(&self) -> Result<Var<'t, T>> {
        let out = self.value().map(kernels::gelu);
        self.tape.push(out, Op::Gelu(self.id), &[self.id])
    }

    pub fn relu(&self) -> Result<Var<'t, T>> {
        let out = self.value().map(|x| if x > T::zero() { x } else { T::zero() });
        self.tape.push(out, Op::Relu(self.id), &[self.id])
    }

    /// Normalizes the last axis, then applies `gamma`, `beta` (shape `[C]`).
    pub fn layer_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        let c = *x.shape().last().unwrap();
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(format!("layer_norm affine params must be [{c}]")));
        }
        let layout = NormLayout { groups: x.numel() / c, channels_per: c, inner: 1, channels: c };
        self.norm(gamma, beta, eps, layout, false)
    }

    /// Group normalization over `[N, C, H, W]`.
    pub fn group_norm(&self, groups: usize, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 4 || groups == 0 || s[1] % groups != 0 {
            return Err(Error::shape(format!("group_norm({groups}) invalid for {s:?}")));
        }
        if gamma.shape() != [s[1]] || beta.shape() != [s[1]] {
            return Err(Error::shape(format!("group_norm affine params must be [{}]", s[1])));
        }
        let layout = NormLayout { groups: s[0] * groups, channels_per: s[1] / groups, inner: s[2] * s[3], channels: s[1] };
        self.norm(gamma, beta, eps, layout, true)
    }

    fn norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: f64, layout: NormLayout, group: bool) -> Result<Var<'t, T>> {
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let mut out = vec![T::zero(); x.numel()];
        let mut xhat = vec![T::zero(); x.numel()];
        let mut rstd = vec![T::zero(); layout.groups];
        kernels::norm_forward(x.data(), gv.data(), bv.data(), &layout, T::of(eps), &mut out, &mut xhat, &mut rstd);
        let op = Op::Norm { x: self.id, gamma: gamma.id, beta: beta.id, layout, xhat, rstd, group };
        self.tape.push(Tensor::new(x.shape(), out)?, op, &[self.id, gamma.id, beta.id])
    }

    /// 2-D convolution over `[N, C, H, W]` with kernel `[Cout, C/groups, kh, kw]`.
    pub fn conv2d(&self, w: &Var<'t, T>, b: Option<&Var<'t, T>>, stride: usize, pad: usize, groups: usize) -> Result<Var<'t, T>> {
        let (x, wv) = (self.value(), w.value());
        let geom = conv::conv_geom(x.shape(), wv.shape(), stride, pad, groups)?;
        let bv = b.map(|b| b.value());
        if let Some(bv) = &bv {
            if bv.shape() != [geom.cout] {
                return Err(Error::shape(format!("conv bias {:?} must be [{}]", bv.shape(), geom.cout)));
            }
        }
        let out = conv::conv2d_forward(x.data(), wv.data(), bv.as_ref().map(|t| t.data()), &geom);
        let out = Tensor::new(&[geom.n, geom.cout, geom.ho, geom.wo], out)?;
        let mut parents = vec![self.id, w.id];
        parents.extend(b.map(|b| b.id));
        self.tape.push(out, Op::Conv { x: self.id, w: w.id, b: b.map(|b| b.id), geom, transposed: false }, &parents)
    }

    /// Transposed convolution with kernel `[Cin, Cout, kh, kw]`.
    pub fn conv_transpose2d(&self, w: &Var<'t, T>, b: Option<&Var<'t, T>>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let (x, wv) = (self.value(), w.value());
        let geom = conv::conv_t_geom(x.shape(), wv.shape(), stride, pad)?;
        let bv = b.map(|b| b.value());
        if let Some(bv) = &bv {
            if bv.shape() != [geom.cout] {
                return Err(Error::shape(format!("conv bias {:?} must be [{}]", bv.shape(), geom.cout)));
            }
        }
        let out = conv::conv_t_forward(x.data(), wv.data(), bv.as_ref().map(|t| t.data()), &geom);
        let out = Tensor::new(&[geom.n, geom.cout, geom.ho, geom.wo], out)?;
        let mut parents = vec![self.id, w.id];
        parents.extend(b.map(|b| b.id));
        self.tape.push(out, Op::Conv { x: self.id, w: w.id, b: b.map(|b| b.id), geom, transposed: true }, &parents)
    }

    /// Average pooling with kernel == stride == `k` over `[N, C, H, W]`.
    pub fn avg_pool2d(&self, k: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(Error::shape(format!("avg_pool2d({k}) needs a 4-d input divisible by {k}, got {s:?}")));
        }
        if k == 1 {
            return Ok(*self);
        }
        let out = kernels::avg_pool(x.data(), s[0] * s[1], s[2], s[3], k);
        let out = Tensor::new(&[s[0], s[1], s[2] / k, s[3] / k], out)?;
        self.tape.push(out, Op::AvgPool(self.id, k), &[self.id])
    }

    /// Nearest-neighbour upsampling by integer factor over `[N, C, H, W]`.
    pub fn upsample_nearest2d(&self, f: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 || f == 0 {
            return Err(Error::shape(format!("upsample_nearest2d({f}) needs a 4-d input, got {s:?}")));
        }
        if f == 1 {
            return Ok(*self);
        }
        let out = kernels::upsample_nearest(x.data(), s[0] * s[1], s[2], s[3], f);
        let out = Tensor::new(&[s[0], s[1], s[2] * f, s[3] * f], out)?;
        self.tape.push(out, Op::Upsample(self.id, f), &[self.id])
    }

    /// `softmax(scale · Q Kᵀ) V` over `[B, Lq, d]`, `[B, Lk, d]`, `[B, Lk, dv]`.
    pub fn attention(&self, k: &Var<'t, T>, v: &Var<'t, T>, scale: f64) -> Result<Var<'t, T>> {
        self.check_tape(k);
        self.check_tape(v);
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        let (qs, ks, vs) = (qv.shape(), kv.shape(), vv.shape());
        if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 || qs[0] != ks[0] || ks[0] != vs[0] || qs[2] != ks[2] {
            return Err(Error::shape(format!("attention operands incompatible: Q {qs:?}, K {ks:?}, V {vs:?}")));
        }
        if ks[1] != vs[1] {
            return Err(Error::shape(format!("attention K/V length mismatch: K {ks:?}, V {vs:?}")));
        }
        let dims = AttnDims { batch: qs[0], lq: qs[1], lk: ks[1], d: qs[2], dv: vs[2] };
        let sc = T::of(scale);
        let (out, probs) = kernels::attention_forward(qv.data(), kv.data(), vv.data(), &dims, sc);
        let out = Tensor::new(&[dims.batch, dims.lq, dims.dv], out)?;
        let op = Op::Attention { q: self.id, k: k.id, v: v.id, scale: sc, dims, probs };
        self.tape.push(out, op, &[self.id, k.id, v.id])
    }

    pub fn sum_last(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        let w = *s.last().unwrap();
        let data = x.data().chunks_exact(w).map(|r| r.iter().copied().sum()).collect();
        let shape = if s.len() == 1 { vec![1] } else { s[..s.len() - 1].to_vec() };
        self.tape.push(Tensor::new(&shape, data)?, Op::SumLast(self.id), &[self.id])
    }

    pub fn sum_all(&self) -> Result<Var<'t, T>> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.id), &[self.id])
    }

    pub fn mean_all(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let m = x.sum() / T::of(x.numel() as f64);
        self.tape.push(Tensor::scalar(m), Op::MeanAll(self.id), &[self.id])
    }
}
