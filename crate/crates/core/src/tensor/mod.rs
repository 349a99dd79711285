//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is a cheap handle (`Arc`) to an immutable node. When an
//! operation is applied while gradient recording is enabled and at least one
//! input tracks gradients, the result keeps handles to its inputs plus a
//! backward closure; otherwise the inputs are released as soon as the caller
//! drops them. The graph is therefore rebuilt on every forward pass and
//! inference under [`no_grad`] holds only live activations.
//!
//! Leaf tensors created with [`Tensor::param`] accumulate gradients across
//! [`Tensor::backward`] calls until [`Tensor::zero_grad`]. Mutating a leaf
//! bumps its version; running backward through a graph recorded against an
//! older version fails with [`Error::StaleGraph`].
//!
//! Precision is chosen by the element type: `f32` for training and
//! inference, `f64` for gradient checks.

mod conv;
mod gradcheck;
mod linalg;
mod ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use parking_lot::{Mutex, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};

pub use conv::{conv3d, max_pool3d, upsample_nearest2x};
pub use gradcheck::{grad_check, grad_check_params, grad_check_with, GradCheckOptions, GradCheckReport};
pub(crate) use linalg::gemm;
pub use ops::{concat_channels, linear_map, softmax_channel};

/// Element type of a tensor.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + MulAssign
    + Sum
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    /// `C = alpha * A * B + beta * C` on strided row/column layouts.
    ///
    /// # Safety
    /// Every index reachable through the given extents and strides must be in
    /// bounds of the corresponding buffer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on the current thread until the guard drops.
pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

#[must_use]
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Computes parent gradients from `(grad_out, out_value, needs_grad)`.
/// Entries for parents whose `needs_grad` flag is false may be `None`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct GradFn<T: Scalar> {
    parents: Vec<(Tensor<T>, u64)>,
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    version: AtomicU64,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub struct Tensor<T: Scalar = f32>(Arc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            version: AtomicU64::new(0),
            requires_grad,
            grad: Mutex::new(None),
            grad_fn: None,
        }))
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(format!("zero extent in {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape(format!(
                "{} elements do not fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// A trainable leaf.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(t.detach_with_grad())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::leaf(shape.to_vec(), vec![value; numel(shape)], false)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(Vec::new(), vec![value], false)
    }

    /// Builds the result of an operation, recording a backward closure only
    /// when some parent tracks gradients and recording is enabled.
    pub(crate) fn make(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: &[&Tensor<T>],
        build: impl FnOnce() -> BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let track = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let grad_fn = track.then(|| GradFn {
            parents: parents.iter().map(|p| ((*p).clone(), p.version())).collect(),
            backward: build(),
        });
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            version: AtomicU64::new(0),
            requires_grad: track,
            grad: Mutex::new(None),
            grad_fn,
        }))
    }

    pub(crate) fn tracking(parents: &[&Tensor<T>]) -> bool {
        is_grad_enabled() && parents.iter().any(|p| p.requires_grad())
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn version(&self) -> u64 {
        self.0.version.load(Ordering::Acquire)
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.0.data.read()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.read().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let d = self.0.data.read();
        debug_assert_eq!(d.len(), 1);
        d[0]
    }

    /// New leaf sharing no graph with `self`.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.shape.clone(), self.to_vec(), false)
    }

    /// New trainable leaf holding a copy of the values.
    pub fn detach_with_grad(&self) -> Self {
        Self::leaf(self.0.shape.clone(), self.to_vec(), true)
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock() = None;
    }

    /// Replaces the values of a leaf tensor.
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::shape("cannot overwrite a non-leaf tensor"));
        }
        if data.len() != self.numel() {
            return Err(Error::shape(format!(
                "set_data: {} values for shape {:?}",
                data.len(),
                self.shape()
            )));
        }
        *self.0.data.write() = data;
        self.0.version.fetch_add(1, Ordering::AcqRel);
        Ok(())
    }

    /// Mutates the values of a leaf tensor in place.
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        assert!(self.is_leaf(), "update_data on a non-leaf tensor");
        f(&mut self.0.data.write());
        self.0.version.fetch_add(1, Ordering::AcqRel);
    }

    /// Mutates values and accumulated gradient of a leaf together.
    pub(crate) fn update_with_grad(&self, f: impl FnOnce(&mut [T], Option<&[T]>)) {
        assert!(self.is_leaf(), "update_with_grad on a non-leaf tensor");
        let grad = self.0.grad.lock();
        f(&mut self.0.data.write(), grad.as_deref());
        self.0.version.fetch_add(1, Ordering::AcqRel);
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Converts element type, producing an untracked leaf.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::of(v.f64())).collect();
        Tensor::leaf(self.0.shape.clone(), data, false)
    }

    /// Accumulates `d self / d leaf` into every tracked leaf reachable from
    /// this scalar.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        for node in &order {
            if let Some(gf) = &node.0.grad_fn {
                if gf.parents.iter().any(|(p, v)| p.version() != *v) {
                    return Err(Error::StaleGraph);
                }
            }
        }
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                Some(gf) => {
                    let needs: Vec<bool> = gf.parents.iter().map(|(p, _)| p.requires_grad()).collect();
                    let out = node.data();
                    let pgrads = (gf.backward)(&g, &out, &needs);
                    drop(out);
                    debug_assert_eq!(pgrads.len(), gf.parents.len());
                    for ((parent, _), pg) in gf.parents.iter().zip(pgrads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel());
                        match grads.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                            None => {
                                grads.insert(parent.id(), pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = node.0.grad.lock();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over tracked nodes (parents before children).
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.id());
        while let Some((node, next)) = stack.pop() {
            let parents = node.0.grad_fn.as_ref().map(|g| g.parents.as_slice()).unwrap_or(&[]);
            if next < parents.len() {
                let child = parents[next].0.clone();
                stack.push((node, next + 1));
                if child.requires_grad() && seen.insert(child.id()) {
                    stack.push((child, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}
