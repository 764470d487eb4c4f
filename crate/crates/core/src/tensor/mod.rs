//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheaply clonable handle (`Arc` inside) to an immutable
//! value buffer plus the op that produced it. Ops whose inputs require
//! gradients record themselves, so the loss tensor transitively owns the
//! whole computation graph; [`Tensor::backward`] linearizes that graph into a
//! [`GradTape`](autograd::GradTape) and walks it in reverse.
//!
//! Values are immutable after creation with two exceptions: gradient
//! accumulation into leaf variables, and in-place parameter updates between
//! optimizer steps (`apply_update`). Graph construction is single-threaded;
//! forward passes over frozen weights may run from many threads at once.

mod autograd;
mod grad_check;
mod ops;
mod scalar;

pub use autograd::{GradTape, Gradients};
pub use grad_check::{grad_check, grad_check_params};
pub use scalar::Scalar;

use std::cell::Cell;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};
use autograd::Op;

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static NAN_GUARD: Cell<bool> = const { Cell::new(false) };
}

/// Enable or disable the per-op finiteness assertion on the current thread.
/// Off by default; meant for debugging runs that produce NaN/Inf.
pub fn set_nan_guard(on: bool) {
    NAN_GUARD.with(|g| g.set(on));
}

pub(crate) fn nan_guard_enabled() -> bool {
    NAN_GUARD.with(|g| g.get())
}

/// Unique identity of a tensor node, used to key gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

pub(crate) struct Inner<E: Scalar> {
    id: TensorId,
    shape: Vec<usize>,
    data: RwLock<Vec<E>>,
    op: Op<E>,
    requires_grad: bool,
    is_var: bool,
    grad: Mutex<Option<Vec<E>>>,
}

/// Dense n-dimensional array participating in a reverse-mode graph.
pub struct Tensor<E: Scalar>(pub(crate) Arc<Inner<E>>);

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<E: Scalar> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={:?}, shape={:?}, var={})",
            self.0.id, self.0.shape, self.0.is_var
        )
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Scalar> Tensor<E> {
    pub(crate) fn make(shape: Vec<usize>, data: Vec<E>, op: Op<E>, is_var: bool) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        if nan_guard_enabled() {
            assert!(
                data.iter().all(|v| v.is_finite()),
                "nan guard: non-finite value produced by {:?} (shape {:?})",
                op.name(),
                shape
            );
        }
        let requires_grad = is_var || op.any_input_requires_grad();
        // Ops feeding nodes that cannot need gradients are not recorded.
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor(Arc::new(Inner {
            id: TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed)),
            shape,
            data: RwLock::new(data),
            op,
            requires_grad,
            is_var,
            grad: Mutex::new(None),
        }))
    }

    /// Constant (non-trainable) tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Self::make(shape.to_vec(), data, Op::Leaf, false))
    }

    /// Trainable leaf variable: gradients accumulate here during backward.
    pub fn var_from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Self::make(shape.to_vec(), data, Op::Leaf, true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::make(shape.to_vec(), vec![E::zero(); numel_of(shape)], Op::Leaf, false)
    }

    pub fn zeros_var(shape: &[usize]) -> Self {
        Self::make(shape.to_vec(), vec![E::zero(); numel_of(shape)], Op::Leaf, true)
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Self::make(shape.to_vec(), vec![value; numel_of(shape)], Op::Leaf, false)
    }

    /// 1-element tensor (shape `[1]`).
    pub fn scalar(value: E) -> Self {
        Self::make(vec![1], vec![value], Op::Leaf, false)
    }

    /// Identity matrix, shape `[n×n]`.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![E::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = E::one();
        }
        Self::make(vec![n, n], data, Op::Leaf, false)
    }

    pub fn id(&self) -> TensorId {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.0.shape)
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    /// True for leaf variables and everything computed from one.
    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True only for trainable leaves created via `var_from_vec`/`zeros_var`.
    pub fn is_var(&self) -> bool {
        self.0.is_var
    }

    pub(crate) fn op(&self) -> &Op<E> {
        &self.0.op
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<E>> {
        self.0.data.read().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.data().clone()
    }

    /// Value of a 1-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() needs a 1-element tensor, shape is {:?}",
                self.shape()
            )));
        }
        Ok(self.data()[0])
    }

    /// Accumulated gradient of a leaf variable, if backward deposited one.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[E]) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += *v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// In-place parameter update (optimizer step). Must not run while a graph
    /// referencing this tensor is still being evaluated.
    pub fn apply_update(&self, f: impl FnOnce(&mut [E])) {
        let mut data = self.0.data.write().expect("tensor data lock poisoned");
        f(&mut data);
    }

    /// Replace the buffer contents (checkpoint load).
    pub fn set_data(&self, values: &[E]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::Shape(format!(
                "set_data: tensor has {} elements, buffer has {}",
                self.numel(),
                values.len()
            )));
        }
        let mut data = self.0.data.write().expect("tensor data lock poisoned");
        data.copy_from_slice(values);
        Ok(())
    }

    /// Detached copy: same values, fresh constant leaf.
    pub fn detach(&self) -> Self {
        Self::make(self.0.shape.clone(), self.to_vec(), Op::Leaf, false)
    }
}
