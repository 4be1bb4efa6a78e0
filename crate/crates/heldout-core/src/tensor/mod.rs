//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The design is the simplest correct one: a [`Tensor`] is a shared handle
//! to shape + flat row-major data (+ optional gradient), and a [`Graph`] is
//! an explicit tape of executed ops, rebuilt on every forward pass.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into every tensor that participates with `requires_grad`.
//!
//! Everything is computed and accumulated in f64; combined with the fixed
//! generator in [`crate::rng`] this makes whole training runs reproducible
//! bit-for-bit.

mod graph;
mod init;
pub(crate) mod kernels;
mod optim;

pub use graph::{Graph, Op, PadMode};
pub use init::{fan_in_normal_init, zeros_init};
pub use optim::Sgd;

use crate::{Error, Result};
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, Ref, RefCell, RefMut};

/// Data and gradient live in separate cells so a backward rule can read a
/// tensor's values while accumulating into its gradient.
struct TensorData {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<f64>>>,
}

/// Shared handle to an n-dimensional array. Cloning a `Tensor` clones the
/// handle, not the storage; ops create fresh outputs and never alias.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorData>,
}

impl Tensor {
    /// Constant (non-differentiable) tensor.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                detail: alloc::format!(
                    "shape {shape:?} does not describe {} elements",
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            inner: Rc::new(TensorData {
                shape: shape.to_vec(),
                data: RefCell::new(data),
                requires_grad: Cell::new(false),
                grad: RefCell::new(None),
            }),
        })
    }

    /// Trainable parameter: participates in autodiff.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        t.inner.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("zeros: positive dims")
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v]).expect("scalar")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.shape.clone()
    }

    /// Shape without cloning, for read-only inspection.
    pub fn shape_ref(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Borrow the flat data.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.data.borrow(), |d| d.as_slice())
    }

    /// Mutably borrow the flat data (optimizer updates, test setup).
    pub fn data_mut(&self) -> RefMut<'_, [f64]> {
        RefMut::map(self.inner.data.borrow_mut(), |d| d.as_mut_slice())
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on non-scalar");
        d[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.inner.requires_grad.set(on);
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Drop the accumulated gradient.
    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Borrow the gradient without copying (None when never accumulated).
    pub(crate) fn grad_ref(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.inner.grad.borrow()
    }

    /// Gradient slice, materializing zeros on first touch.
    pub(crate) fn grad_mut(&self) -> RefMut<'_, [f64]> {
        let mut g = self.inner.grad.borrow_mut();
        if g.is_none() {
            *g = Some(vec![0.0; self.len()]);
        }
        RefMut::map(g, |g| g.as_mut().expect("just set").as_mut_slice())
    }

    /// Deep copy with the same flags (fresh storage, no grad).
    pub fn clone_storage(&self) -> Tensor {
        let t = Tensor::new(&self.inner.shape, self.inner.data.borrow().clone())
            .expect("valid source");
        t.inner.requires_grad.set(self.requires_grad());
        t
    }

    /// Identity of the underlying storage; two handles to one tensor agree.
    pub fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub(crate) fn take_grad(&self) -> Result<Vec<f64>> {
        self.inner
            .grad
            .borrow_mut()
            .take()
            .ok_or_else(|| Error::MissingGrad {
                param: alloc::format!("{:?}", self.shape_ref()),
            })
    }
}

impl core::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let d = self.data();
        write!(
            f,
            "Tensor{:?} requires_grad={} (first {:?})",
            self.inner.shape,
            self.requires_grad(),
            &d[..d.len().min(4)]
        )
    }
}
