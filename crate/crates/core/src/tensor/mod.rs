//! Dense f64 tensors on a reverse-mode gradient tape.
//!
//! The tape is define-by-run: every forward pass builds a fresh [`Tape`],
//! ops record nodes as they execute, and [`Tape::backward`] replays the
//! nodes in reverse creation order. Tensors are cheap handles; cloning a
//! [`Tensor`] aliases the same storage, so gradients accumulate across
//! every use of a value.

mod gradcheck;
mod ops;
mod optim;
mod tape;

pub use gradcheck::{grad_check, grad_check_coords};
pub use optim::AdamW;
pub use tape::{OpKind, Tape};

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit reals.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

pub(crate) struct Inner {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<f64>>,
    /// True when a gradient must flow through this value (a leaf with
    /// `requires_grad`, or any op output derived from one).
    pub(crate) track: bool,
    /// Index of the tape node that produced this tensor, if any.
    pub(crate) tape_id: Option<usize>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != data.len() {
            return Err(Error::InvalidShape {
                op: "new",
                shape: shape.to_vec(),
                msg: format!("shape does not match data length {}", data.len()),
            });
        }
        Ok(Self::raw(shape.to_vec(), data, false))
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        t.inner.borrow_mut().requires_grad = true;
        t.inner.borrow_mut().track = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Self::raw(shape.to_vec(), vec![0.0; numel], false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::raw(vec![1, 1], vec![v], false)
    }

    /// Row-major matrix from nested rows. Panics on ragged input; intended
    /// for literals in tests and small fixtures.
    pub fn from_rows(rows: &[Vec<f64>]) -> Tensor {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        assert!(r > 0 && c > 0 && rows.iter().all(|x| x.len() == c));
        Self::raw(vec![r, c], rows.concat(), false)
    }

    fn raw(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                requires_grad,
                grad: None,
                track: requires_grad,
                tape_id: None,
            })),
        }
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, track: bool, tape_id: usize) -> Tensor {
        let t = Self::raw(shape, data, false);
        {
            let mut inner = t.inner.borrow_mut();
            inner.track = track;
            inner.tape_id = Some(tape_id);
        }
        t
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn rows(&self) -> usize {
        self.inner.borrow().shape[0]
    }

    pub fn cols(&self) -> usize {
        let s = &self.inner.borrow().shape;
        s[s.len() - 1]
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Scalar value; panics if the tensor is not 1x1.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    /// Removes and returns the accumulated gradient.
    pub fn take_grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow_mut().grad.take()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Copy of the value cut off from gradient tracking.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Self::raw(inner.shape.clone(), inner.data.clone(), false)
    }

    /// Overwrites the value in place, keeping shape and grad state.
    pub fn set_data(&self, data: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len());
        inner.data.copy_from_slice(data);
    }

    /// Stable identity for keying optimizer state.
    pub fn id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub(crate) fn inner(&self) -> &Rc<RefCell<Inner>> {
        &self.inner
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .field("data", &inner.data)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_rejected() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn detach_stops_tracking() {
        let p = Tensor::param(&[1, 2], vec![1.0, 2.0]).unwrap();
        let d = p.detach();
        assert!(!d.requires_grad());
        assert_eq!(d.to_vec(), vec![1.0, 2.0]);
    }
}
