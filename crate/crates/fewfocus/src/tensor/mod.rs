//! Dense 4-D `[N, C, H, W]` single-precision tensors with reverse-mode
//! autodiff recorded on an explicit [`Tape`].

mod conv;
pub mod gradcheck;
pub mod ops;
mod tape;

pub use tape::Tape;

use std::ops::Deref;
use std::sync::{Arc, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};

/// Shape of a 4-D tensor: `[batch, channels, height, width]`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
    /// Elements per batch item.
    pub fn chw(&self) -> usize {
        self.0[1] * self.0[2] * self.0[3]
    }
    /// Elements per channel plane.
    pub fn hw(&self) -> usize {
        self.0[2] * self.0[3]
    }
    pub fn is_scalar(&self) -> bool {
        self.0 == [1, 1, 1, 1]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

struct TensorData {
    shape: Shape,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

/// Shared handle to a 4-D tensor. Cloning is cheap (reference counted);
/// ops record backward closures holding such handles on the tape, and the
/// optimizer mutates parameter tensors in place through the same handle.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<RwLock<TensorData>>,
}

/// Read guard over a tensor's values.
pub struct DataRef<'a>(RwLockReadGuard<'a, TensorData>);

impl Deref for DataRef<'_> {
    type Target = [f32];
    fn deref(&self) -> &[f32] {
        &self.0.data
    }
}

impl Tensor {
    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Tensor> {
        let shape = Shape(shape);
        if shape.numel() != data.len() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor::new(shape, data, false))
    }

    pub fn zeros(shape: [usize; 4]) -> Tensor {
        let shape = Shape(shape);
        Tensor::new(shape, vec![0.0; shape.numel()], false)
    }

    pub fn full(shape: [usize; 4], value: f32) -> Tensor {
        let shape = Shape(shape);
        Tensor::new(shape, vec![value; shape.numel()], false)
    }

    /// A `[1,1,1,1]` tensor holding one value.
    pub fn scalar(value: f32) -> Tensor {
        Tensor::new(Shape([1, 1, 1, 1]), vec![value], false)
    }

    pub(crate) fn new(shape: Shape, data: Vec<f32>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            inner: Arc::new(RwLock::new(TensorData {
                shape,
                data,
                grad: None,
                requires_grad,
            })),
        }
    }

    pub fn shape(&self) -> Shape {
        self.inner.read().unwrap().shape
    }

    pub fn numel(&self) -> usize {
        self.shape().numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.read().unwrap().requires_grad
    }

    pub fn set_requires_grad(&self, requires_grad: bool) {
        self.inner.write().unwrap().requires_grad = requires_grad;
    }

    /// Borrow the values for reading.
    pub fn data(&self) -> DataRef<'_> {
        DataRef(self.inner.read().unwrap())
    }

    /// Copy the values out.
    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.read().unwrap().data.clone()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f32 {
        let d = self.inner.read().unwrap();
        debug_assert_eq!(d.data.len(), 1, "item() on non-scalar tensor");
        d.data[0]
    }

    /// Copy of the gradient buffer, if one has been accumulated.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.read().unwrap().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.write().unwrap().grad = None;
    }

    /// New leaf tensor sharing this tensor's current values but cut off
    /// from the autodiff graph.
    pub fn detach(&self) -> Tensor {
        let d = self.inner.read().unwrap();
        Tensor::new(d.shape, d.data.clone(), false)
    }

    /// Mutate the values in place (optimizer updates, finite differences).
    /// Any stale gradient buffer is left untouched.
    pub fn update_data(&self, f: impl FnOnce(&mut [f32])) {
        let mut d = self.inner.write().unwrap();
        f(&mut d.data);
    }

    /// Add `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&self, delta: &[f32]) {
        let mut d = self.inner.write().unwrap();
        debug_assert_eq!(delta.len(), d.data.len());
        match d.grad.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => d.grad = Some(delta.to_vec()),
        }
    }

    pub(crate) fn seed_grad_ones(&self) {
        let mut d = self.inner.write().unwrap();
        let n = d.data.len();
        d.grad = Some(vec![1.0; n]);
    }

    /// True if every value is finite.
    pub fn all_finite(&self) -> bool {
        self.inner.read().unwrap().data.iter().all(|v| v.is_finite())
    }

    /// True when two handles point at the same storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.inner.read().unwrap();
        f.debug_struct("Tensor")
            .field("shape", &d.shape)
            .field("requires_grad", &d.requires_grad)
            .field("has_grad", &d.grad.is_some())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::from_vec([1, 1, 2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn grad_accumulates_additively() {
        let t = Tensor::zeros([1, 1, 1, 2]);
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, -1.0]);
        assert_eq!(t.grad().unwrap(), vec![1.5, 1.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn detach_shares_values_not_graph() {
        let t = Tensor::from_vec([1, 1, 1, 2], vec![3.0, 4.0]).unwrap();
        t.set_requires_grad(true);
        let d = t.detach();
        assert_eq!(d.to_vec(), vec![3.0, 4.0]);
        assert!(!d.requires_grad());
        assert!(!d.same_storage(&t));
    }
}
