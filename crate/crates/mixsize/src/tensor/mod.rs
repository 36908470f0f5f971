//! Dense tensors with reverse-mode autodiff.
//!
//! A [`Tensor`] is a cheaply clonable handle (`Arc`) to a contiguous buffer
//! plus an optional gradient buffer of the same length. Values are immutable
//! once produced by an op; only parameter updates (between tape executions)
//! write through [`Tensor::data_mut`]. Handles are `Send + Sync`, so frozen
//! tensors can cross threads; recording itself is single-threaded via
//! [`Tape`].

mod basic;
mod bn;
mod conv;
mod loss;
mod resize;
mod tape;

pub use basic::{
    add, crop2d, flatten_spatial, global_avg_pool, hflip, linear, max_pool2d, pad2d, relu,
    scale, sum,
};
pub use bn::{batch_channel_stats, batchnorm2d, BnMode, BnStats, StatsAccum};
pub use conv::conv2d;
pub use loss::softmax_cross_entropy;
pub use resize::{bilinear_resize, bilinear_resize_hw, resize_plane, resize_plane_backward};
pub use tape::Tape;

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use crate::elem::Elem;
use crate::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);
static FINITE_CHECKS: AtomicBool = AtomicBool::new(false);

/// Enable or disable the per-op finite-output check.
///
/// Off by default; verification suites switch it on to surface NaN/Inf
/// propagation at the op that produced it instead of steps later.
pub fn set_finite_checks(enabled: bool) {
    FINITE_CHECKS.store(enabled, Ordering::Relaxed);
}

pub fn finite_checks_enabled() -> bool {
    FINITE_CHECKS.load(Ordering::Relaxed)
}

struct Inner<T: Elem> {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    grad: RwLock<Option<Vec<T>>>,
    requires_grad: bool,
}

/// Dense N-dimensional array with optional gradient.
pub struct Tensor<T: Elem> {
    inner: Arc<Inner<T>>,
}

impl<T: Elem> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Elem> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(crate::shape_err!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Self::build(shape.to_vec(), data, false))
    }

    /// New tensor that participates in autodiff (a parameter or input leaf).
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(t.with_requires_grad(true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::build(shape.to_vec(), vec![T::zero(); numel], false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::build(shape.to_vec(), vec![value; numel], false)
    }

    pub fn scalar_tensor(value: T) -> Self {
        Self::build(vec![1], vec![value], false)
    }

    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                grad: RwLock::new(None),
                requires_grad,
            }),
        }
    }

    /// Same data handle with `requires_grad` replaced (fresh id if changed).
    pub fn with_requires_grad(self, requires_grad: bool) -> Self {
        if self.inner.requires_grad == requires_grad {
            return self;
        }
        let data = self.data().clone();
        Self::build(self.inner.shape.clone(), data, requires_grad)
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, track: bool) -> Self {
        Self::build(shape, data, track)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.inner.data.read().unwrap()
    }

    /// Mutable access to the value buffer. Callers must not hold this across
    /// tape execution; parameter updates happen between tapes.
    pub fn data_mut(&self) -> RwLockWriteGuard<'_, Vec<T>> {
        self.inner.data.write().unwrap()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(crate::domain_err!(
                "item() on tensor with {} elements",
                self.numel()
            ));
        }
        Ok(self.data()[0])
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.read().unwrap().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.inner.grad.read().unwrap().is_some()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.write().unwrap() = None;
    }

    /// Accumulate `delta` into the gradient buffer (allocated on first use).
    pub fn accumulate_grad(&self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut guard = self.inner.grad.write().unwrap();
        match guard.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => *guard = Some(delta.to_vec()),
        }
    }

    pub(crate) fn seed_grad_ones(&self) {
        *self.inner.grad.write().unwrap() = Some(vec![T::one(); self.numel()]);
    }

    /// Deep copy of the value buffer (gradient not copied).
    pub fn detached_copy(&self) -> Self {
        Self::build(self.inner.shape.clone(), self.data().clone(), false)
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}

impl<T: Elem> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

/// Guard shared by ops: reject non-finite outputs when checks are on.
pub(crate) fn finite_guard<T: Elem>(op: &str, out: &Tensor<T>) -> Result<()> {
    if finite_checks_enabled() && !out.is_finite() {
        return Err(Error::Numeric(format!("{op} produced a non-finite value")));
    }
    Ok(())
}

/// Expect a 4-D feature map and return (n, c, h, w).
pub(crate) fn dims4<T: Elem>(x: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        &[n, c, h, w] => Ok((n, c, h, w)),
        other => Err(crate::shape_err!("{what}: expected 4-D [N,C,H,W], got {other:?}")),
    }
}
