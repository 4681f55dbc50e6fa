//! Small reverse-mode automatic differentiation engine over `f64` tensors.
//!
//! Every operation records its operands on the produced [`Tensor`]; calling
//! [`Tensor::backward`] on a scalar walks that graph in reverse topological
//! order and accumulates gradients into the leaves that were created with
//! [`Tensor::param`]. Leaf gradients keep accumulating across calls until
//! [`Tensor::zero_grad`] is invoked, so a loss made of several terms can be
//! differentiated term by term or as a sum with the same result.
//!
//! Values are stored row-major. Convolutions use NCHW activations and OIKhKw
//! kernels with cross-correlation semantics.

mod conv;
mod param;

pub use param::{backward, ParamSet};

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{invalid, shape_err, Error, Result};

/// Argument clamp applied by [`Tensor::log`] in every loss term.
pub const LOG_EPS: f64 = 1e-12;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording operations; results are detached constants.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Shared handle to a node of the differentiation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

struct Node {
    id: usize,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<Op>,
}

enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Scale(Tensor, f64),
    Relu(Tensor),
    Log { input: Tensor, eps: f64 },
    Sum(Tensor),
    Mean(Tensor),
    SumAxis { input: Tensor, axis: usize },
    Reshape(Tensor),
    MatMul(Tensor, Tensor),
    AddBias(Tensor, Tensor),
    Conv2d {
        input: Tensor,
        kernel: Tensor,
        bias: Tensor,
        geom: conv::Geometry,
    },
    GlobalAvgPool(Tensor),
    Softmax { input: Tensor, axis: usize },
    NormalizeRows(Tensor),
    CrossEntropy {
        logits: Tensor,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Gather { input: Tensor, rows: Vec<usize> },
    Stitch { parts: Vec<(Tensor, Vec<usize>)> },
    ScaleRows { input: Tensor, weights: Tensor },
}

impl Op {
    fn operands(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::MatMul(a, b) | Op::AddBias(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::GlobalAvgPool(a)
            | Op::NormalizeRows(a) => vec![a],
            Op::Log { input, .. }
            | Op::SumAxis { input, .. }
            | Op::Softmax { input, .. }
            | Op::Gather { input, .. } => vec![input],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => vec![input, kernel, bias],
            Op::Stitch { parts } => parts.iter().map(|(t, _)| t).collect(),
            Op::ScaleRows { input, weights } => vec![input, weights],
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        let tracked = grad_enabled() && op.operands().iter().any(|t| t.requires_grad());
        if tracked {
            Tensor::build(shape, data, true, Some(op))
        } else {
            Tensor::build(shape, data, false, None)
        }
    }

    /// Constant tensor (never receives gradients).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::checked(shape, data, false)
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::checked(shape, data, true)
    }

    fn checked(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if shape.contains(&0) {
            return shape_err("tensor", format!("extents must be positive, got {shape:?}"));
        }
        if numel(shape) != data.len() {
            return shape_err(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            );
        }
        Ok(Tensor::build(shape.to_vec(), data, requires_grad, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::build(shape.to_vec(), vec![0.0; numel(shape)], false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(vec![1], vec![value], false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Mutable view of the values. Only meaningful on leaves (optimizer updates).
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on a tensor of shape {:?}", self.shape());
        self.0.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Accumulated gradient of a leaf; `None` until a backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Copy of the values as a new constant.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.0.shape.clone(), self.to_vec(), false, None)
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(())
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let a = self.data();
        let b = other.data();
        a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.data().iter().map(|&x| f(x)).collect()
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let out = self.zip(other, |a, b| a + b);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let out = self.zip(other, |a, b| a - b);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let out = self.zip(other, |a, b| a * b);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Mul(self.clone(), other.clone())))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "div")?;
        let out = self.zip(other, |a, b| a / b);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Div(self.clone(), other.clone())))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let out = self.map(|a| a * factor);
        Tensor::from_op(self.shape().to_vec(), out, Op::Scale(self.clone(), factor))
    }

    pub fn relu(&self) -> Tensor {
        let out = self.map(|a| if a > 0.0 { a } else { 0.0 });
        Tensor::from_op(self.shape().to_vec(), out, Op::Relu(self.clone()))
    }

    /// Natural log of `max(x, eps)`.
    pub fn log(&self, eps: f64) -> Tensor {
        let out = self.map(|a| a.max(eps).ln());
        Tensor::from_op(self.shape().to_vec(), out, Op::Log { input: self.clone(), eps })
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![s], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![1], vec![s / self.numel() as f64], Op::Mean(self.clone()))
    }

    /// Sums over `axis`, removing it from the shape (a 1-D input yields shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = self.split_axis(axis, "sum_axis")?;
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op(shape, out, Op::SumAxis { input: self.clone(), axis }))
    }

    fn split_axis(&self, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        let shape = self.shape();
        if axis >= shape.len() {
            return invalid(op, format!("axis {axis} out of range for shape {shape:?}"));
        }
        Ok((
            numel(&shape[..axis]),
            shape[axis],
            numel(&shape[axis + 1..]),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape()),
            );
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape(self.clone())))
    }

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 {
            return shape_err("matmul", format!("expected 2-D operands, got {a:?} and {b:?}"));
        }
        if a[1] != b[0] {
            return shape_err(
                "matmul",
                format!("inner dimensions differ: {} (lhs dim 1) vs {} (rhs dim 0)", a[1], b[0]),
            );
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let out = matmul_raw(&self.data(), &other.data(), m, k, n);
        Ok(Tensor::from_op(vec![m, n], out, Op::MatMul(self.clone(), other.clone())))
    }

    /// Adds `bias` (shape `[K]`) to every row of a `[.., K]` tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let k = *self.shape().last().unwrap_or(&0);
        if bias.shape() != [k] {
            return shape_err(
                "add_bias",
                format!("bias shape {:?} does not match last dimension {k}", bias.shape()),
            );
        }
        let b = bias.data();
        let out: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % k])
            .collect();
        drop(b);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::AddBias(self.clone(), bias.clone())))
    }

    /// Affine map `input · weights + bias` for `input: [N, F]`, `weights: [F, K]`, `bias: [K]`.
    pub fn dense(&self, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
        self.matmul(weights)?.add_bias(bias)
    }

    /// 2-D cross-correlation with zero padding.
    pub fn conv2d(&self, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let geom = conv::Geometry::new(self.shape(), kernel.shape(), bias.shape(), stride, padding)?;
        let out = conv::forward(&geom, &self.data(), &kernel.data(), &bias.data());
        Ok(Tensor::from_op(
            geom.output_shape().to_vec(),
            out,
            Op::Conv2d {
                input: self.clone(),
                kernel: kernel.clone(),
                bias: bias.clone(),
                geom,
            },
        ))
    }

    /// Mean over the spatial extent of an NCHW tensor, giving `[N, C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return shape_err("global_avg_pool", format!("expected NCHW, got {s:?}"));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let x = self.data();
        let out: Vec<f64> = x
            .chunks_exact(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        drop(x);
        Ok(Tensor::from_op(vec![n, c], out, Op::GlobalAvgPool(self.clone())))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = self.split_axis(axis, "softmax")?;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (x[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Softmax { input: self.clone(), axis }))
    }

    /// Divides each row of a `[N, K]` tensor by its sum.
    pub fn normalize_rows(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return shape_err("normalize_rows", format!("expected [N, K], got {s:?}"));
        }
        let k = s[1];
        let x = self.data();
        let mut out = Vec::with_capacity(x.len());
        for (r, row) in x.chunks_exact(k).enumerate() {
            let total: f64 = row.iter().sum();
            if !total.is_finite() {
                return Err(Error::NonFinite { op: "normalize_rows" });
            }
            if !(total > 0.0) {
                return invalid("normalize_rows", format!("row {r} has non-positive mass {total}"));
            }
            out.extend(row.iter().map(|v| v / total));
        }
        drop(x);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::NormalizeRows(self.clone())))
    }

    /// Mean cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return shape_err("cross_entropy", format!("expected [N, K] logits, got {s:?}"));
        }
        let (n, k) = (s[0], s[1]);
        if targets.len() != n {
            return shape_err("cross_entropy", format!("{} targets for {n} rows", targets.len()));
        }
        if let Some((row, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= k) {
            return invalid("cross_entropy", format!("target {t} at row {row} outside [0, {k})"));
        }
        let x = self.data();
        let mut probs = Vec::with_capacity(x.len());
        let mut loss = 0.0;
        for (row, &t) in x.chunks_exact(k).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - row[t];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![1],
            vec![loss / n as f64],
            Op::CrossEntropy {
                logits: self.clone(),
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Selects rows along axis 0.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let n = self.shape()[0];
        if rows.is_empty() {
            return invalid("gather_rows", "no rows selected");
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return invalid("gather_rows", format!("row {r} outside [0, {n})"));
        }
        let stride = self.numel() / n;
        let x = self.data();
        let mut out = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            out.extend_from_slice(&x[r * stride..(r + 1) * stride]);
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape[0] = rows.len();
        Ok(Tensor::from_op(shape, out, Op::Gather { input: self.clone(), rows: rows.to_vec() }))
    }

    /// Inverse of [`Tensor::gather_rows`]: places each part's rows at the given
    /// positions of an `n`-row output. Every position must be covered exactly once.
    pub fn stitch_rows(parts: Vec<(Tensor, Vec<usize>)>, n: usize) -> Result<Tensor> {
        let Some((first, _)) = parts.first() else {
            return invalid("stitch_rows", "no parts");
        };
        let tail = first.shape()[1..].to_vec();
        let stride = numel(&tail);
        let mut out = vec![0.0; n * stride];
        let mut covered = vec![false; n];
        for (t, rows) in &parts {
            if t.shape()[1..] != tail[..] || t.shape()[0] != rows.len() {
                return shape_err(
                    "stitch_rows",
                    format!("part of shape {:?} with {} rows vs row shape {tail:?}", t.shape(), rows.len()),
                );
            }
            let x = t.data();
            for (i, &r) in rows.iter().enumerate() {
                if r >= n || covered[r] {
                    return invalid("stitch_rows", format!("row {r} out of range or covered twice"));
                }
                covered[r] = true;
                out[r * stride..(r + 1) * stride].copy_from_slice(&x[i * stride..(i + 1) * stride]);
            }
        }
        if let Some(r) = covered.iter().position(|c| !c) {
            return invalid("stitch_rows", format!("row {r} not covered"));
        }
        let mut shape = vec![n];
        shape.extend(tail);
        Ok(Tensor::from_op(shape, out, Op::Stitch { parts }))
    }

    /// Multiplies sample `n` of a `[N, ..]` tensor by `weights[n]`.
    pub fn scale_rows(&self, weights: &Tensor) -> Result<Tensor> {
        let n = self.shape()[0];
        if weights.shape() != [n] {
            return shape_err("scale_rows", format!("weights {:?} for {n} rows", weights.shape()));
        }
        let stride = self.numel() / n;
        let w = weights.data();
        let out: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * w[i / stride])
            .collect();
        drop(w);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::ScaleRows { input: self.clone(), weights: weights.clone() },
        ))
    }

    /// Reverse pass from a one-element loss, accumulating into leaf gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return invalid("backward", format!("loss must be a scalar, got shape {:?}", self.shape()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.0.id, vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.0.id) else {
                continue;
            };
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    for (parent, pg) in node.local_grads(op, &g) {
                        if !parent.requires_grad() {
                            continue;
                        }
                        match grads.get_mut(&parent.0.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(parent.0.id, pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.0.id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for p in op.operands() {
                    if p.requires_grad() && !seen.contains(&p.0.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }

    fn local_grads(&self, op: &Op, g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
        match op {
            Op::Add(a, b) => vec![(a.clone(), g.to_vec()), (b.clone(), g.to_vec())],
            Op::Sub(a, b) => vec![(a.clone(), g.to_vec()), (b.clone(), g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let ga = mul_vec(g, &b.data());
                let gb = mul_vec(g, &a.data());
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
            Op::Div(a, b) => {
                let (av, bv) = (a.data(), b.data());
                let ga: Vec<f64> = g.iter().zip(bv.iter()).map(|(g, b)| g / b).collect();
                let gb: Vec<f64> = g
                    .iter()
                    .zip(av.iter().zip(bv.iter()))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect();
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
            Op::Scale(a, f) => vec![(a.clone(), g.iter().map(|v| v * f).collect())],
            Op::Relu(a) => {
                let gx = g
                    .iter()
                    .zip(a.data().iter())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(a.clone(), gx)]
            }
            Op::Log { input, eps } => {
                let gx = g
                    .iter()
                    .zip(input.data().iter())
                    .map(|(g, &x)| if x >= *eps { g / x } else { 0.0 })
                    .collect();
                vec![(input.clone(), gx)]
            }
            Op::Sum(a) => vec![(a.clone(), vec![g[0]; a.numel()])],
            Op::Mean(a) => vec![(a.clone(), vec![g[0] / a.numel() as f64; a.numel()])],
            Op::SumAxis { input, axis } => {
                let (outer, len, inner) = input.split_axis(*axis, "sum_axis").expect("validated");
                let mut gx = vec![0.0; input.numel()];
                for o in 0..outer {
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(input.clone(), gx)]
            }
            Op::Reshape(a) => vec![(a.clone(), g.to_vec())],
            Op::MatMul(a, b) => {
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let (av, bv) = (a.data(), b.data());
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * bv[p * n + j];
                        }
                        ga[i * k + p] = acc;
                        let aip = av[i * k + p];
                        for j in 0..n {
                            gb[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
            Op::AddBias(x, b) => {
                let k = b.numel();
                let mut gb = vec![0.0; k];
                for (i, v) in g.iter().enumerate() {
                    gb[i % k] += v;
                }
                vec![(x.clone(), g.to_vec()), (b.clone(), gb)]
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let grads = conv::backward(
                    geom,
                    &input.data(),
                    &kernel.data(),
                    g,
                    input.requires_grad(),
                    kernel.requires_grad() || bias.requires_grad(),
                );
                vec![
                    (input.clone(), grads.input),
                    (kernel.clone(), grads.kernel),
                    (bias.clone(), grads.bias),
                ]
            }
            Op::GlobalAvgPool(a) => {
                let s = a.shape();
                let plane = s[2] * s[3];
                let mut gx = Vec::with_capacity(a.numel());
                for v in g {
                    gx.extend(std::iter::repeat_n(v / plane as f64, plane));
                }
                vec![(a.clone(), gx)]
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = input.split_axis(*axis, "softmax").expect("validated");
                let y = self.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![(input.clone(), gx)]
            }
            Op::NormalizeRows(a) => {
                let k = a.shape()[1];
                let x = a.data();
                let y = self.data();
                let mut gx = Vec::with_capacity(x.len());
                for ((xr, yr), gr) in x.chunks_exact(k).zip(y.chunks_exact(k)).zip(g.chunks_exact(k)) {
                    let total: f64 = xr.iter().sum();
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    gx.extend(gr.iter().map(|g| (g - dot) / total));
                }
                vec![(a.clone(), gx)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &t) in targets.iter().enumerate() {
                    gx[row * k + t] -= scale;
                }
                vec![(logits.clone(), gx)]
            }
            Op::Gather { input, rows } => {
                let stride = input.numel() / input.shape()[0];
                let mut gx = vec![0.0; input.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..stride {
                        gx[r * stride + j] += g[i * stride + j];
                    }
                }
                vec![(input.clone(), gx)]
            }
            Op::Stitch { parts } => {
                let stride = self.numel() / self.shape()[0];
                parts
                    .iter()
                    .map(|(t, rows)| {
                        let mut gp = Vec::with_capacity(rows.len() * stride);
                        for &r in rows {
                            gp.extend_from_slice(&g[r * stride..(r + 1) * stride]);
                        }
                        (t.clone(), gp)
                    })
                    .collect()
            }
            Op::ScaleRows { input, weights } => {
                let n = weights.numel();
                let stride = input.numel() / n;
                let (x, w) = (input.data(), weights.data());
                let mut gx = Vec::with_capacity(x.len());
                let mut gw = vec![0.0; n];
                for (i, gv) in g.iter().enumerate() {
                    gx.push(gv * w[i / stride]);
                    gw[i / stride] += gv * x[i];
                }
                vec![(input.clone(), gx), (weights.clone(), gw)]
            }
        }
    }
}

fn mul_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("leaf", &self.is_leaf())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn dense_examples() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let w = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(x.dense(&w, &b).unwrap().to_vec(), vec![4.0, 6.0]);

        let zero_b = Tensor::zeros(&[2]);
        assert_eq!(x.dense(&w, &zero_b).unwrap().to_vec(), vec![1.0, 2.0]);

        let zx = Tensor::zeros(&[3, 2]);
        assert_eq!(zx.dense(&w, &b).unwrap().to_vec(), vec![3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn dense_rejects_mismatch() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 2]);
        let err = x.dense(&w, &Tensor::zeros(&[2])).unwrap_err();
        assert!(err.to_string().contains("inner dimensions"), "{err}");
        assert!(x.matmul(&Tensor::zeros(&[3, 2])).unwrap().add_bias(&Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn softmax_relu_cross_entropy_examples() {
        let s = t(&[2], &[0.0, 0.0]).softmax(0).unwrap();
        assert_eq!(s.to_vec(), vec![0.5, 0.5]);
        assert_eq!(t(&[2], &[-1.0, 2.0]).relu().to_vec(), vec![0.0, 2.0]);
        let ce = t(&[1, 2], &[0.0, 0.0]).cross_entropy(&[0]).unwrap();
        assert!((ce.item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(t(&[1, 2], &[0.0, 0.0]).cross_entropy(&[2]).is_err());
        assert!(t(&[2], &[0.0, 0.0]).softmax(1).is_err());
    }

    #[test]
    fn softmax_over_leading_axis() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 0.0, -1.0]);
        let s = x.softmax(0).unwrap().to_vec();
        for col in 0..3 {
            assert!((s[col] + s[3 + col] - 1.0).abs() < 1e-12);
        }
        assert!((s[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_clamps_at_eps() {
        let x = Tensor::param(&[3], vec![0.0, 1e-20, 2.0]).unwrap();
        let y = x.log(LOG_EPS);
        assert_eq!(y.to_vec()[0], LOG_EPS.ln());
        assert_eq!(y.to_vec()[1], LOG_EPS.ln());
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 0.5]);
    }

    #[test]
    fn backward_square_sum() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(x.scale(2.0).backward().is_err());
    }

    #[test]
    fn unused_leaf_gets_no_gradient() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = Tensor::param(&[2], vec![3.0, 4.0]).unwrap();
        y.sum().backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn gather_stitch_round_trip_gradients() {
        let x = Tensor::param(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let a = x.gather_rows(&[2, 0]).unwrap();
        let b = x.gather_rows(&[1]).unwrap().scale(10.0);
        let y = Tensor::stitch_rows(vec![(a, vec![2, 0]), (b, vec![1])], 3).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 30.0, 40.0, 5.0, 6.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 10.0, 10.0, 1.0, 1.0]);
    }

    #[test]
    fn stitch_requires_full_cover() {
        let a = Tensor::zeros(&[1, 2]);
        assert!(Tensor::stitch_rows(vec![(a, vec![0])], 2).is_err());
    }

    #[test]
    fn no_grad_detaches() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| x.scale(2.0));
        assert!(!y.requires_grad());
        assert!(x.scale(2.0).requires_grad());
    }

    #[test]
    fn normalize_rows_rejects_zero_mass() {
        assert!(Tensor::zeros(&[1, 2]).normalize_rows().is_err());
    }
}
