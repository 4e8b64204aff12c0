//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every op appends a node holding its forward value and whatever context its
//! backward rule needs. Nodes are appended in execution order, so a node's
//! inputs always precede it and a single reverse sweep visits each node once.
//!
//! ```
//! use rseg::autodiff::Tape;
//! use rseg::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod conv;
mod norm;
mod pool;

use std::sync::Arc;

pub use conv::{conv2d_backward, conv2d_forward, conv2d_transpose_backward, conv2d_transpose_forward, Conv2dGeom};
pub use norm::{BatchNormMode, BatchNormParams, RunningStats};
pub use pool::{maxpool2x2_forward, maxunpool2x2_forward, upsample_nearest2x_forward, PoolIndices};

use crate::tensor::{Result, Scalar, Tensor, TensorError};
use norm::BatchNormCtx;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Log(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv2dGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv2dGeom,
    },
    MaxPool {
        x: Var,
        indices: Arc<PoolIndices>,
    },
    MaxUnpool {
        x: Var,
        indices: Arc<PoolIndices>,
    },
    Upsample2x(Var),
    Concat {
        a: Var,
        b: Var,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    MulChannels {
        x: Var,
        a: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        ctx: BatchNormCtx<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Log(x)
            | Op::Clamp { x, .. }
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Sum(x)
            | Op::MaxPool { x, .. }
            | Op::MaxUnpool { x, .. }
            | Op::Upsample2x(x)
            | Op::SliceChannels { x, .. } => vec![x],
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => vec![x, w, b],
            Op::Concat { a, b } => vec![a, b],
            Op::MulChannels { x, a } => vec![x, a],
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Log(..) => "log",
            Op::Clamp { .. } => "clamp",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Sum(..) => "sum",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv2d_transpose",
            Op::MaxPool { .. } => "maxpool2d",
            Op::MaxUnpool { .. } => "maxunpool2d",
            Op::Upsample2x(..) => "upsample_nearest2x",
            Op::Concat { .. } => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::MulChannels { .. } => "mul_channels",
            Op::BatchNorm { .. } => "batchnorm2d",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Elementwise op selector for [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise<T> {
    Add,
    Sub,
    Mul,
    Div,
    Log,
    Clamp(T, T),
}

/// Ordered record of every op executed in one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`; `None` only when `v` does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<'a, T: Scalar>(slot: &'a mut Option<Tensor<T>>, shape: &[usize]) -> &'a mut [T] {
    slot.get_or_insert_with(|| Tensor::zeros(shape.to_vec())).data_mut()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node from `len` on. Vars pointing past the cut become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Forward value of `v`.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Op names in execution order.
    pub fn op_names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.nodes.iter().map(|n| n.op.name())
    }

    /// Input indices of each node, in execution order.
    pub fn edges(&self) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .map(|n| n.op.inputs().into_iter().map(Var::index).collect())
            .collect()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Re-enters the current value of `v` as a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, op)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(value, op)
    }

    /// Dispatches one of the elementwise kinds; `b` is required for binary kinds.
    pub fn elementwise(&mut self, kind: Elementwise<T>, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| TensorError::Invalid("binary elementwise op needs two operands".into()));
        match kind {
            Elementwise::Add => self.add(a, need_b()?),
            Elementwise::Sub => self.sub(a, need_b()?),
            Elementwise::Mul => self.mul(a, need_b()?),
            Elementwise::Div => self.div(a, need_b()?),
            Elementwise::Log => self.log(a),
            Elementwise::Clamp(lo, hi) => self.clamp(a, lo, hi),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.value(x).data().iter().find(|&&v| !(v > T::zero())) {
            return Err(TensorError::LogDomain(bad.to_f64_lossy()));
        }
        self.unary(x, Op::Log(x), T::ln)
    }

    /// Clamps to `[lo, hi]`; the gradient is zero wherever the bound is active.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        if !(lo <= hi) {
            return Err(TensorError::Invalid(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    /// Branch taken by every piecewise op on the tape: ReLU signs, clamp
    /// activity and pooling argmaxes. Two forward passes of the same graph with
    /// equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(self.value(*x).data().iter().map(|&v| usize::from(v > T::zero()))),
                Op::Clamp { x, lo, hi } => out.extend(
                    self.value(*x)
                        .data()
                        .iter()
                        .map(|v| usize::from(v > lo) + usize::from(v < hi) * 2),
                ),
                Op::MaxPool { indices, .. } => out.extend_from_slice(indices.argmax()),
                _ => {}
            }
        }
        out
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    /// Logistic sigmoid, evaluated with the sign-stable branch and kept strictly
    /// inside `(0, 1)`: results are clamped to `[min_positive, 1 - eps/2]`.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: Conv2dGeom) -> Result<Var> {
        let value = conv2d_forward(self.value(x), self.value(w), self.value(b), geom)?;
        self.push(value, Op::Conv2d { x, w, b, geom })
    }

    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Var, geom: Conv2dGeom) -> Result<Var> {
        let value = conv2d_transpose_forward(self.value(x), self.value(w), self.value(b), geom)?;
        self.push(value, Op::ConvTranspose2d { x, w, b, geom })
    }

    /// 2x2/stride-2 max pooling; also returns the recorded argmax map.
    pub fn maxpool2d(&mut self, x: Var) -> Result<(Var, Arc<PoolIndices>)> {
        let (value, indices) = maxpool2x2_forward(self.value(x))?;
        let indices = Arc::new(indices);
        let v = self.push(
            value,
            Op::MaxPool {
                x,
                indices: Arc::clone(&indices),
            },
        )?;
        Ok((v, indices))
    }

    pub fn maxunpool2d(&mut self, x: Var, indices: &Arc<PoolIndices>, out_shape: [usize; 4]) -> Result<Var> {
        let value = maxunpool2x2_forward(self.value(x), indices, out_shape)?;
        self.push(
            value,
            Op::MaxUnpool {
                x,
                indices: Arc::clone(indices),
            },
        )
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let value = upsample_nearest2x_forward(self.value(x))?;
        self.push(value, Op::Upsample2x(x))
    }

    /// Channel concatenation, `a`'s channels first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4("concat_channels")?;
        let (nb, cb, hb, wb) = self.value(b).dims4("concat_channels")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(na * (ca + cb) * plane);
        for n in 0..na {
            data.extend_from_slice(&self.value(a).data()[n * ca * plane..(n + 1) * ca * plane]);
            data.extend_from_slice(&self.value(b).data()[n * cb * plane..(n + 1) * cb * plane]);
        }
        let value = Tensor::new([na, ca + cb, ha, wa], data)?;
        self.push(value, Op::Concat { a, b })
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).channels(start, len)?;
        self.push(value, Op::SliceChannels { x, start })
    }

    /// `x (N,C,H,W) * a (N,1,H,W)`, broadcasting `a` over channels.
    pub fn mul_channels(&mut self, x: Var, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("mul_channels")?;
        if self.value(a).shape() != [n, 1, h, w] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_channels",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(a).shape().to_vec(),
            });
        }
        let plane = h * w;
        let (xv, av) = (self.value(x).data(), self.value(a).data());
        let data = (0..xv.len())
            .map(|i| xv[i] * av[(i / (c * plane)) * plane + i % plane])
            .collect();
        let value = Tensor::new([n, c, h, w], data)?;
        self.push(value, Op::MulChannels { x, a })
    }

    /// Batch normalization. In [`BatchNormMode::Train`] the running statistics
    /// are updated in place as `(1 - momentum) * running + momentum * batch`
    /// (biased batch variance).
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<T>,
        mode: BatchNormMode,
        params: BatchNormParams<T>,
    ) -> Result<Var> {
        let (value, ctx) = norm::batchnorm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running,
            mode,
            params,
        )?;
        self.push(value, Op::BatchNorm { x, gamma, beta, ctx })
    }

    /// Reverse sweep from a scalar `loss`, seeded with `dloss/dloss = 1`.
    ///
    /// Every node that requires a gradient gets one; nodes the loss does not
    /// depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_ref() else { continue };
            self.backward_node(node, g.data(), before)?;
        }
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if node.requires_grad && slot.is_none() {
                *slot = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[v.0];
        node.requires_grad
            .then(|| accumulate(&mut grads[v.0], node.value.shape()))
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = node.value.data();
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, v) {
                        add_into(d, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.slot(grads, a) {
                    add_into(d, g);
                }
                if let Some(d) = self.slot(grads, b) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if let Some(d) = self.slot(grads, a) {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * vb[i];
                    }
                }
                if let Some(d) = self.slot(grads, b) {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * va[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(b).data();
                if let Some(d) = self.slot(grads, a) {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] / vb[i];
                    }
                }
                if let Some(d) = self.slot(grads, b) {
                    // d(a/b)/db = -(a/b)/b
                    for i in 0..d.len() {
                        d[i] = d[i] - g[i] * out[i] / vb[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(d) = self.slot(grads, x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * c);
                }
            }
            Op::AddScalar(x) => {
                if let Some(d) = self.slot(grads, x) {
                    add_into(d, g);
                }
            }
            Op::Log(x) => {
                let vx = self.value(x).data();
                if let Some(d) = self.slot(grads, x) {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] / vx[i];
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let vx = self.value(x).data();
                if let Some(d) = self.slot(grads, x) {
                    for i in 0..d.len() {
                        if vx[i] > lo && vx[i] < hi {
                            d[i] = d[i] + g[i];
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let vx = self.value(x).data();
                if let Some(d) = self.slot(grads, x) {
                    for i in 0..d.len() {
                        if vx[i] > T::zero() {
                            d[i] = d[i] + g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = self.slot(grads, x) {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * out[i] * (T::one() - out[i]);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.slot(grads, x) {
                    let s = g[0];
                    d.iter_mut().for_each(|d| *d = *d + s);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
                let (dx, dw, db) = self.slots3(grads, x, w, b);
                conv2d_backward(vx, vw, vb, geom, g, dx, dw, db)?;
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
                let (dx, dw, db) = self.slots3(grads, x, w, b);
                conv2d_transpose_backward(vx, vw, vb, geom, g, dx, dw, db)?;
            }
            Op::MaxPool { x, ref indices } => {
                if let Some(d) = self.slot(grads, x) {
                    pool::maxpool2x2_backward(indices, g, d);
                }
            }
            Op::MaxUnpool { x, ref indices } => {
                let out_shape = indices.input_shape();
                if let Some(d) = self.slot(grads, x) {
                    pool::maxunpool2x2_backward(indices, out_shape, g, d);
                }
            }
            Op::Upsample2x(x) => {
                let shape = self.value(x).shape().to_vec();
                if let Some(d) = self.slot(grads, x) {
                    pool::upsample_nearest2x_backward(&shape, g, d);
                }
            }
            Op::Concat { a, b } => {
                let sa = self.value(a).shape().to_vec();
                let sb = self.value(b).shape().to_vec();
                let plane = sa[2] * sa[3];
                let (ca, cb) = (sa[1] * plane, sb[1] * plane);
                if let Some(d) = self.slot(grads, a) {
                    for n in 0..sa[0] {
                        add_into(&mut d[n * ca..(n + 1) * ca], &g[n * (ca + cb)..n * (ca + cb) + ca]);
                    }
                }
                if let Some(d) = self.slot(grads, b) {
                    for n in 0..sb[0] {
                        add_into(
                            &mut d[n * cb..(n + 1) * cb],
                            &g[n * (ca + cb) + ca..(n + 1) * (ca + cb)],
                        );
                    }
                }
            }
            Op::SliceChannels { x, start } => {
                let sx = self.value(x).shape().to_vec();
                let plane = sx[2] * sx[3];
                let len = node.value.shape()[1] * plane;
                let full = sx[1] * plane;
                if let Some(d) = self.slot(grads, x) {
                    for n in 0..sx[0] {
                        let off = n * full + start * plane;
                        add_into(&mut d[off..off + len], &g[n * len..(n + 1) * len]);
                    }
                }
            }
            Op::MulChannels { x, a } => {
                let s = self.value(x).shape().to_vec();
                let (c, plane) = (s[1], s[2] * s[3]);
                let (vx, va) = (self.value(x).data(), self.value(a).data());
                let at = |i: usize| (i / (c * plane)) * plane + i % plane;
                if let Some(d) = self.slot(grads, x) {
                    for i in 0..d.len() {
                        d[i] = d[i] + g[i] * va[at(i)];
                    }
                }
                if let Some(d) = self.slot(grads, a) {
                    for i in 0..g.len() {
                        let j = at(i);
                        d[j] = d[j] + g[i] * vx[i];
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                ref ctx,
            } => {
                let shape = self.value(x).shape().to_vec();
                let vg = self.value(gamma);
                let (dx, dg, db) = self.slots3(grads, x, gamma, beta);
                norm::batchnorm_backward(&shape, vg, ctx, g, dx, dg, db);
            }
        }
        Ok(())
    }

    // Three distinct mutable gradient slots; inputs of one node are distinct vars
    // except in degenerate hand-built graphs, which fall back to sequential use.
    #[allow(clippy::type_complexity)]
    fn slots3<'g>(
        &self,
        grads: &'g mut [Option<Tensor<T>>],
        a: Var,
        b: Var,
        c: Var,
    ) -> (Option<&'g mut [T]>, Option<&'g mut [T]>, Option<&'g mut [T]>) {
        assert!(a != b && b != c && a != c, "op inputs must be distinct nodes");
        for v in [a, b, c] {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], self.nodes[v.0].value.shape());
            }
        }
        let mut refs: [Option<&'g mut [T]>; 3] = [None, None, None];
        let order = [a.0, b.0, c.0];
        let mut rest: &'g mut [Option<Tensor<T>>] = grads;
        let mut offset = 0;
        let mut sorted: Vec<(usize, usize)> = order.iter().copied().enumerate().map(|(k, i)| (i, k)).collect();
        sorted.sort_unstable();
        for (idx, k) in sorted {
            let (_, tail) = std::mem::take(&mut rest).split_at_mut(idx - offset);
            let (head, tail) = tail.split_at_mut(1);
            refs[k] = head[0].as_mut().map(|t| t.data_mut());
            rest = tail;
            offset = idx + 1;
        }
        let [ra, rb, rc] = refs;
        (ra, rb, rc)
    }
}

fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
}

/// Sign-stable logistic function, clamped to the open unit interval.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let top = T::one() - T::epsilon() / (T::one() + T::one());
    y.max(T::min_positive_value()).min(top)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn add_and_log() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
        let one = tape.constant(t(&[1], &[1.0]));
        let l = tape.log(one).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
    }

    #[test]
    fn elementwise_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(TensorError::ShapeMismatch { .. })));
        let z = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(z), Err(TensorError::LogDomain(_))));
        assert!(tape.elementwise(Elementwise::Mul, a, None).is_err());
    }

    #[test]
    fn relu_values_and_dead_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[-1.0, -2.0, -0.5]));
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 3]);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn sigmoid_center_and_tails() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[0.0]));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.5);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.25);

        let lo = sigmoid(-1000.0f64);
        assert!(lo > 0.0 && lo <= 1e-300);
        let hi = sigmoid(1000.0f64);
        assert!(hi < 1.0 && hi > 0.5);
        assert!(sigmoid(-200.0f32) > 0.0 && sigmoid(200.0f32) < 1.0);
    }

    #[test]
    fn sum_and_broadcast_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.value(s).item(), 6.0);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 3]);
        let mut tape = Tape::new();
        let z = tape.param(Tensor::<f64>::zeros([4]));
        let s = tape.sum(z).unwrap();
        assert_eq!(tape.value(s).item(), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar_and_zero_fills_disconnected() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[2], &[5.0, 6.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn concat_then_slice_is_exact() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn([1, 2, 4, 4], |i| i as f64 * 0.3));
        let b = tape.constant(Tensor::from_fn([1, 3, 4, 4], |i| -(i as f64) * 0.7));
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 5, 4, 4]);
        let sa = tape.slice_channels(c, 0, 2).unwrap();
        let sb = tape.slice_channels(c, 2, 3).unwrap();
        assert_eq!(tape.value(sa), tape.value(a));
        assert_eq!(tape.value(sb), tape.value(b));
        let d = tape.constant(Tensor::zeros([1, 1, 2, 4]));
        assert!(tape.concat_channels(a, d).is_err());
    }

    #[test]
    fn batchnorm_zero_variance_and_two_point() {
        let params = BatchNormParams {
            eps: 1e-5,
            momentum: 0.1,
        };
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 1, 2, 2], 3.0));
        let g = tape.constant(Tensor::ones([1]));
        let b = tape.constant(Tensor::zeros([1]));
        let mut stats = RunningStats::fresh(1);
        let y = tape
            .batchnorm2d(x, g, b, &mut stats, BatchNormMode::Train, params)
            .unwrap();
        assert!(tape.value(y).data().iter().all(|v: &f64| v.abs() <= 1e-12));
        assert!((stats.mean[0] - 0.3f64).abs() < 1e-12);
        assert!((stats.var[0] - 0.9f64).abs() < 1e-12);

        let x = tape.constant(t(&[1, 1, 1, 2], &[-1.0, 1.0]));
        let mut stats = RunningStats::fresh(1);
        let y = tape
            .batchnorm2d(x, g, b, &mut stats, BatchNormMode::Train, params)
            .unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((tape.value(y).data()[0] + expect).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - expect).abs() < 1e-12);

        let bad = tape.constant(Tensor::ones([2]));
        assert!(tape
            .batchnorm2d(x, bad, b, &mut stats, BatchNormMode::Eval, params)
            .is_err());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(tape.scale(x, 10.0), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn tape_order_is_topological() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.mul(x, x).unwrap();
        let z = tape.relu(y).unwrap();
        let _ = tape.sum(z).unwrap();
        for (i, ins) in tape.edges().iter().enumerate() {
            assert!(ins.iter().all(|&j| j < i));
        }
    }
}
