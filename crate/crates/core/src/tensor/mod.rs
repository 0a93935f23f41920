//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted, row-major buffer. Every
//! operation on tensors that require gradients records a node holding the
//! operation and its inputs; [`Tensor::backward`] and [`grad`] walk those
//! nodes in reverse creation order. Backward rules are themselves written in
//! terms of tensor operations, so running them with graph recording enabled
//! (`create_graph`) yields differentiable gradients. The gradient penalty of
//! the critic relies on this.

mod autograd;
pub mod ops;
mod scalar;

use std::cell::Cell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use autograd::{grad, GradOptions, Gradients, Tape};
pub(crate) use autograd::{BackwardCtx, BackwardOp};
pub use scalar::{DType, Scalar};
pub(crate) use scalar::{gemm, gemm_ld, MatRef};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static ESTIMATE_UPDATES: Cell<bool> = const { Cell::new(true) };
}

/// Whether operations currently record autograd nodes.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Whether stateful estimators (spectral-norm power iteration) may update.
pub fn estimates_update() -> bool {
    ESTIMATE_UPDATES.with(|g| g.get())
}

struct FlagGuard {
    key: &'static std::thread::LocalKey<Cell<bool>>,
    prev: bool,
}

impl FlagGuard {
    fn set(key: &'static std::thread::LocalKey<Cell<bool>>, value: bool) -> Self {
        let prev = key.with(|c| c.replace(value));
        Self { key, prev }
    }
}

impl Drop for FlagGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        self.key.with(|c| c.set(prev));
    }
}

/// Runs `f` with graph recording switched on or off.
pub fn with_grad_enabled<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    let _guard = FlagGuard::set(&GRAD_ENABLED, enabled);
    f()
}

/// Runs `f` without recording autograd nodes.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_enabled(false, f)
}

/// Runs `f` with spectral-norm estimates frozen but recording unchanged.
pub fn frozen_estimates<R>(f: impl FnOnce() -> R) -> R {
    let _est = FlagGuard::set(&ESTIMATE_UPDATES, false);
    f()
}

/// Runs `f` without recording and with spectral-norm estimates frozen.
pub fn inference<R>(f: impl FnOnce() -> R) -> R {
    let _grad = FlagGuard::set(&GRAD_ENABLED, false);
    let _est = FlagGuard::set(&ESTIMATE_UPDATES, false);
    f()
}

pub(crate) struct Node<T: Scalar> {
    pub op: Box<dyn BackwardOp<T>>,
    pub inputs: Vec<Tensor<T>>,
    pub consumed: Cell<bool>,
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    requires_grad: bool,
    node: Option<Node<T>>,
}

/// N-dimensional array with optional participation in the autograd graph.
pub struct Tensor<T: Scalar = f32> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("op", &self.inner.node.as_ref().map(|n| n.op.name()))
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl<T: Scalar> Tensor<T> {
    fn build(data: Rc<Vec<T>>, shape: Vec<usize>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Self {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                node,
            }),
        }
    }

    /// Constant tensor from a row-major buffer.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::shape(
                "from_vec",
                format!("buffer of {} elements for shape {:?}", data.len(), shape),
            ));
        }
        Ok(Self::build(Rc::new(data), shape.to_vec(), false, None))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(t.requires_grad_(true))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| T::of(v)).collect(), shape)
    }

    pub fn scalar(v: f64) -> Self {
        Self::build(Rc::new(vec![T::of(v)]), vec![], false, None)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::build(Rc::new(vec![T::of(v); numel(shape)]), shape.to_vec(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| T::of(rng.gen_range(lo..hi))).collect();
        Self::build(Rc::new(data), shape.to_vec(), false, None)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Self::build(Rc::new(data), shape.to_vec(), false, None)
    }

    /// Same tensor as a new leaf with the requested gradient flag.
    pub fn requires_grad_(self, on: bool) -> Self {
        if self.inner.requires_grad == on && self.inner.node.is_none() {
            return self;
        }
        Self::build(Rc::clone(&self.inner.data), self.inner.shape.clone(), on, None)
    }

    /// Cuts the tensor out of the graph; the buffer is shared.
    pub fn detach(&self) -> Self {
        Self::build(Rc::clone(&self.inner.data), self.inner.shape.clone(), false, None)
    }

    /// Records the result of an operation. A node is attached only when
    /// recording is enabled and some input requires gradients.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        op: impl BackwardOp<T> + 'static,
        inputs: Vec<Tensor<T>>,
    ) -> Result<Self> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{} (element {} of shape {:?})",
                op.name(),
                pos,
                shape
            )));
        }
        let record = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = record.then(|| Node {
            op: Box::new(op),
            inputs,
            consumed: Cell::new(false),
        });
        Ok(Self::build(Rc::new(data), shape, record, node))
    }

    /// Result of a shape-only operation that shares the input buffer.
    pub(crate) fn view_op(
        &self,
        shape: Vec<usize>,
        op: impl BackwardOp<T> + 'static,
    ) -> Self {
        let record = is_grad_enabled() && self.requires_grad();
        let node = record.then(|| Node {
            op: Box::new(op),
            inputs: vec![self.clone()],
            consumed: Cell::new(false),
        });
        Self::build(Rc::clone(&self.inner.data), shape, record, node)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.iter().map(|v| v.f64()).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub(crate) fn node(&self) -> Option<&Node<T>> {
        self.inner.node.as_ref()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::shape("item", format!("tensor of shape {:?}", self.shape())));
        }
        Ok(self.inner.data[0])
    }

    /// Element-type conversion; the result is a constant leaf.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.inner.data.iter().map(|v| U::of(v.f64())).collect();
        Tensor::build(Rc::new(data), self.inner.shape.clone(), false, None)
    }

    /// Constant tensor of the same shape, computed elementwise from this one.
    pub(crate) fn map_const(&self, f: impl Fn(T) -> T) -> Self {
        let data = self.inner.data.iter().map(|&v| f(v)).collect();
        Self::build(Rc::new(data), self.inner.shape.clone(), false, None)
    }

    /// Size of axis `axis`; negative values count from the end.
    pub fn dim(&self, axis: isize) -> Result<usize> {
        let a = self.axis(axis)?;
        Ok(self.inner.shape[a])
    }

    pub(crate) fn axis(&self, axis: isize) -> Result<usize> {
        let r = self.rank() as isize;
        let a = if axis < 0 { r + axis } else { axis };
        if a < 0 || a >= r {
            return Err(Error::invalid(format!("axis {axis} out of range for rank {r}")));
        }
        Ok(a as usize)
    }

    /// `(B, C, D, H, W)` of a rank-5 volume tensor.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        match self.shape() {
            &[b, c, d, h, w] => Ok([b, c, d, h, w]),
            s => Err(Error::shape("dims5", format!("expected rank-5 tensor, got {s:?}"))),
        }
    }
}
