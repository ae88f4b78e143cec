use std::cell::RefCell;
use std::rc::Rc;

use super::kernels;
use super::{cst, PaddingSpec, Scalar, Tensor};
use crate::error::{Error, Result};

/// Coarse op categories, used for structural assertions on built graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Elementwise,
    Reduction,
    Pad,
    Conv2d,
    ConvTranspose2d,
    InstanceNorm,
    Demodulate,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Abs(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    Relu(usize),
    LeakyRelu(usize, T),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Pad2d(usize, PaddingSpec),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        crop: PaddingSpec,
    },
    InstanceNorm {
        x: usize,
        gamma: Option<usize>,
        beta: Option<usize>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Demodulate {
        w: usize,
        axis: usize,
        inv_norm: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Sum(_) | Op::Mean(_) => OpKind::Reduction,
            Op::Pad2d(..) => OpKind::Pad,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::InstanceNorm { .. } => OpKind::InstanceNorm,
            Op::Demodulate { .. } => OpKind::Demodulate,
            _ => OpKind::Elementwise,
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
    // Accumulated gradient, only kept for trainable leaves.
    grad: Option<Vec<T>>,
}

/// Append-only record of a computation. Node order is a topological order.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let grad = (needs_grad && matches!(op, Op::Leaf)).then(|| vec![T::zero(); value.numel()]);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
            grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf: gradients accumulate into it on every backward pass.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count_ops(&self, kind: OpKind) -> usize {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| n.op.kind() == kind)
            .count()
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    /// Reverse-mode sweep from a scalar. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].needs_grad {
                continue;
            }
            let node = &nodes[id];
            let value = &node.value;
            let needs = |i: usize| nodes[i].needs_grad;
            match &node.op {
                Op::Leaf => {}
                &Op::Add(a, b) => {
                    if needs(a) {
                        add_into(&mut grads[a], &g);
                    }
                    if needs(b) {
                        add_into(&mut grads[b], &g);
                    }
                }
                &Op::Sub(a, b) => {
                    if needs(a) {
                        add_into(&mut grads[a], &g);
                    }
                    if needs(b) {
                        let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                        add_into(&mut grads[b], &neg);
                    }
                }
                &Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a].value.clone(), nodes[b].value.clone());
                    if needs(a) {
                        let d: Vec<T> = g.iter().zip(vb.data()).map(|(&g, &v)| g * v).collect();
                        add_into(&mut grads[a], &d);
                    }
                    if needs(b) {
                        let d: Vec<T> = g.iter().zip(va.data()).map(|(&g, &v)| g * v).collect();
                        add_into(&mut grads[b], &d);
                    }
                }
                &Op::Scale(a, f) => {
                    let d: Vec<T> = g.iter().map(|&v| v * f).collect();
                    add_into(&mut grads[a], &d);
                }
                &Op::AddScalar(a) => add_into(&mut grads[a], &g),
                &Op::Abs(a) => {
                    let x = &nodes[a].value;
                    let d: Vec<T> = g
                        .iter()
                        .zip(x.data())
                        .map(|(&g, &v)| if v > T::zero() { g } else if v < T::zero() { -g } else { T::zero() })
                        .collect();
                    add_into(&mut grads[a], &d);
                }
                &Op::Square(a) => {
                    let x = &nodes[a].value;
                    let two: T = cst(2.0);
                    let d: Vec<T> = g.iter().zip(x.data()).map(|(&g, &v)| two * g * v).collect();
                    add_into(&mut grads[a], &d);
                }
                &Op::Sum(a) => {
                    let d = vec![g[0]; nodes[a].value.numel()];
                    add_into(&mut grads[a], &d);
                }
                &Op::Mean(a) => {
                    let n = nodes[a].value.numel();
                    let d = vec![g[0] / cst(n as f64); n];
                    add_into(&mut grads[a], &d);
                }
                &Op::Relu(a) => {
                    let x = &nodes[a].value;
                    let d: Vec<T> = g
                        .iter()
                        .zip(x.data())
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    add_into(&mut grads[a], &d);
                }
                &Op::LeakyRelu(a, slope) => {
                    let x = &nodes[a].value;
                    let d: Vec<T> = g
                        .iter()
                        .zip(x.data())
                        .map(|(&g, &v)| if v > T::zero() { g } else { g * slope })
                        .collect();
                    add_into(&mut grads[a], &d);
                }
                &Op::Tanh(a) => {
                    let d: Vec<T> = g
                        .iter()
                        .zip(value.data())
                        .map(|(&g, &y)| g * (T::one() - y * y))
                        .collect();
                    add_into(&mut grads[a], &d);
                }
                &Op::Sigmoid(a) => {
                    let d: Vec<T> = g
                        .iter()
                        .zip(value.data())
                        .map(|(&g, &y)| g * y * (T::one() - y))
                        .collect();
                    add_into(&mut grads[a], &d);
                }
                &Op::Softplus(a) => {
                    let x = &nodes[a].value;
                    let d: Vec<T> = g.iter().zip(x.data()).map(|(&g, &v)| g * sigmoid(v)).collect();
                    add_into(&mut grads[a], &d);
                }
                &Op::Pad2d(a, spec) => {
                    let d = kernels::pad2d_backward(&g, nodes[a].value.shape(), &spec);
                    add_into(&mut grads[a], &d);
                }
                &Op::Conv2d { x, w, b, stride } => {
                    let (dx, dw, db) = kernels::conv2d_backward(
                        &nodes[x].value,
                        &nodes[w].value,
                        &g,
                        stride,
                        needs(x),
                        needs(w),
                    );
                    if let Some(dx) = dx {
                        add_into(&mut grads[x], &dx);
                    }
                    if let Some(dw) = dw {
                        add_into(&mut grads[w], &dw);
                    }
                    if let Some(b) = b.filter(|&b| needs(b)) {
                        add_into(&mut grads[b], &db);
                    }
                }
                &Op::ConvTranspose2d {
                    x,
                    w,
                    b,
                    stride,
                    crop,
                } => {
                    let (dx, dw, db) = kernels::conv_transpose2d_backward(
                        &nodes[x].value,
                        &nodes[w].value,
                        &g,
                        stride,
                        &crop,
                        needs(x),
                        needs(w),
                    );
                    if let Some(dx) = dx {
                        add_into(&mut grads[x], &dx);
                    }
                    if let Some(dw) = dw {
                        add_into(&mut grads[w], &dw);
                    }
                    if let Some(b) = b.filter(|&b| needs(b)) {
                        add_into(&mut grads[b], &db);
                    }
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let shape = nodes[*x].value.shape().to_vec();
                    let (c, n) = (shape[1], shape[2] * shape[3]);
                    let gamma_v = gamma.map(|gi| nodes[gi].value.clone());
                    if let Some(gi) = gamma.filter(|&gi| needs(gi)) {
                        let mut d = vec![T::zero(); c];
                        for (p, (gc, xc)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                            d[p % c] += gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>();
                        }
                        add_into(&mut grads[gi], &d);
                    }
                    if let Some(bi) = beta.filter(|&bi| needs(bi)) {
                        let mut d = vec![T::zero(); c];
                        for (p, gc) in g.chunks(n).enumerate() {
                            d[p % c] += gc.iter().copied().sum::<T>();
                        }
                        add_into(&mut grads[bi], &d);
                    }
                    if needs(*x) {
                        let dxhat: Vec<T> = match &gamma_v {
                            Some(gv) => g
                                .iter()
                                .enumerate()
                                .map(|(i, &v)| v * gv.data()[(i / n) % c])
                                .collect(),
                            None => g.clone(),
                        };
                        let d = kernels::instance_norm_backward(xhat, inv_std, &dxhat, n);
                        add_into(&mut grads[*x], &d);
                    }
                }
                Op::Demodulate { w, axis, inv_norm } => {
                    let d = kernels::demodulate_backward(&nodes[*w].value, inv_norm, &g, *axis);
                    add_into(&mut grads[*w], &d);
                }
            }
            if matches!(nodes[id].op, Op::Leaf) {
                if let Some(acc) = nodes[id].grad.as_mut() {
                    acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v);
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &v)| *a += v),
        None => *slot = Some(g.to_vec()),
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow for large |x|.
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        let value = self.value();
        let tape = self.tape;
        let mut nodes = tape.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            grad: None,
        });
        Var {
            tape,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self) -> bool {
        self.requires_grad()
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let out = self.value().map(f);
        self.tape.push(out, op, self.needs())
    }

    fn binary(
        &self,
        other: &Var<'t, T>,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(out, op, self.needs() || other.needs()))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Var<'t, T> {
        let f: T = cst(factor);
        self.unary(Op::Scale(self.id, f), |v| v * f)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t, T> {
        let c: T = cst(c);
        self.unary(Op::AddScalar(self.id), |v| v + c)
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-1.0)
    }

    pub fn abs(&self) -> Var<'t, T> {
        self.unary(Op::Abs(self.id), |v| v.abs())
    }

    pub fn square(&self) -> Var<'t, T> {
        self.unary(Op::Square(self.id), |v| v * v)
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), self.needs())
    }

    pub fn mean(&self) -> Var<'t, T> {
        let v = self.value();
        let m = v.sum() / cst(v.numel() as f64);
        self.tape.push(Tensor::scalar(m), Op::Mean(self.id), self.needs())
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(Op::Relu(self.id), |v| v.max(T::zero()))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t, T> {
        let s: T = cst(slope);
        self.unary(Op::LeakyRelu(self.id, s), |v| if v > T::zero() { v } else { v * s })
    }

    pub fn tanh(&self) -> Var<'t, T> {
        self.unary(Op::Tanh(self.id), |v| v.tanh())
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    /// `log(1 + exp(x))`, evaluated stably.
    pub fn softplus(&self) -> Var<'t, T> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn pad2d(&self, spec: PaddingSpec) -> Result<Var<'t, T>> {
        let out = kernels::pad2d(&self.value(), &spec)?;
        Ok(self.tape.push(out, Op::Pad2d(self.id, spec), self.needs()))
    }

    /// Cross-correlation (no kernel flip) of a `[B, C, H, W]` input with a
    /// `[C', C, K, K]` kernel, after padding.
    pub fn conv2d(
        &self,
        kernel: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        stride: usize,
        padding: PaddingSpec,
    ) -> Result<Var<'t, T>> {
        if !self.value().is_finite() {
            return Err(Error::non_finite("conv2d input"));
        }
        let input = if padding.is_none() {
            *self
        } else {
            self.pad2d(padding)?
        };
        let out = kernels::conv2d_forward(
            &input.value(),
            &kernel.value(),
            bias.map(|b| b.value()).as_deref(),
            stride,
        )?;
        let needs = input.needs() || kernel.needs() || bias.is_some_and(|b| b.needs());
        Ok(self.tape.push(
            out,
            Op::Conv2d {
                x: input.id,
                w: kernel.id,
                b: bias.map(|b| b.id),
                stride,
            },
            needs,
        ))
    }

    /// Adjoint of [`Var::conv2d`] for a kernel laid out `[C, C', K, K]`;
    /// `padding` crops the `(H-1)*stride + K` full output.
    pub fn conv_transpose2d(
        &self,
        kernel: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        stride: usize,
        padding: PaddingSpec,
    ) -> Result<Var<'t, T>> {
        if !self.value().is_finite() {
            return Err(Error::non_finite("conv_transpose2d input"));
        }
        let out = kernels::conv_transpose2d_forward(
            &self.value(),
            &kernel.value(),
            bias.map(|b| b.value()).as_deref(),
            stride,
            &padding,
        )?;
        let needs = self.needs() || kernel.needs() || bias.is_some_and(|b| b.needs());
        Ok(self.tape.push(
            out,
            Op::ConvTranspose2d {
                x: self.id,
                w: kernel.id,
                b: bias.map(|b| b.id),
                stride,
                crop: padding,
            },
            needs,
        ))
    }

    /// Per-sample, per-channel standardization followed by an optional
    /// per-channel affine map.
    pub fn instance_norm(
        &self,
        gamma: Option<&Var<'t, T>>,
        beta: Option<&Var<'t, T>>,
        eps: f64,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let [_, c, h, w] = x.dims4("instance_norm")?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if let Some(p) = p {
                if p.shape() != [c] {
                    return Err(Error::shape(
                        "instance_norm",
                        format!("{name} shape {:?} for {c} channels", p.shape()),
                    ));
                }
            }
        }
        let (xhat, inv_std) = kernels::instance_norm_forward(&x, cst(eps))?;
        let n = h * w;
        let gv = gamma.map(|g| g.value());
        let bv = beta.map(|b| b.value());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / n) % c;
                let g = gv.as_ref().map_or(T::one(), |g| g.data()[ch]);
                let b = bv.as_ref().map_or(T::zero(), |b| b.data()[ch]);
                g * v + b
            })
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let needs = self.needs()
            || gamma.is_some_and(|g| g.needs())
            || beta.is_some_and(|b| b.needs());
        Ok(self.tape.push(
            out,
            Op::InstanceNorm {
                x: self.id,
                gamma: gamma.map(|g| g.id),
                beta: beta.map(|b| b.id),
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Demodulates a convolution kernel; `axis` is the output-channel axis
    /// (0 for `[out, in, k, k]`, 1 for transposed `[in, out, k, k]`).
    pub fn demodulate(&self, eps: f64, axis: usize) -> Result<Var<'t, T>> {
        let w = self.value();
        w.dims4("demodulate")?;
        if axis > 1 {
            return Err(Error::InvalidArgument(format!(
                "demodulation axis must be 0 or 1, got {axis}"
            )));
        }
        let (out, inv_norm) = kernels::demodulate_forward(&w, cst(eps), axis);
        Ok(self.tape.push(
            out,
            Op::Demodulate {
                w: self.id,
                axis,
                inv_norm,
            },
            self.needs(),
        ))
    }
}
