//! Dense row-major tensors.

use crate::error::{Error, Result};
use crate::real::Real;

/// A dense N-dimensional array with an optional gradient slot.
///
/// 4-D activations are laid out batch × channels × height × width. A rank-0
/// tensor (empty `dims`) holds a single scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidExtent(dims.to_vec()));
    }
    Ok(dims.iter().product())
}

impl<T: Real> Tensor<T> {
    /// Wraps `data` with the given extents.
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let expected = check_dims(dims)?;
        if expected != data.len() {
            return Err(Error::LengthMismatch {
                dims: dims.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// A tensor with every element set to `value`.
    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        let n = check_dims(dims)?;
        Self::new(dims, vec![value; n])
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a differentiation target.
    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Installs a gradient; its length must match the data.
    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::LengthMismatch {
                dims: self.dims.clone(),
                expected: self.data.len(),
                got: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Same data, new extents.
    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n = check_dims(dims)?;
        if n != self.data.len() {
            return Err(Error::LengthMismatch {
                dims: dims.to_vec(),
                expected: n,
                got: self.data.len(),
            });
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Converts to another float width. The gradient is dropped.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at a multi-index; panics when out of range.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.dims.len(), "index rank");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.dims) {
            assert!(i < d, "index {index:?} out of range for {:?}", self.dims);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    /// Concatenates equally shaped `1 x ...` tensors along the leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| crate::error::shape_err("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.dims != first.dims {
                return Err(crate::error::shape_err(
                    "stack",
                    format!("{:?} vs {:?}", t.dims, first.dims),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut dims = first.dims.clone();
        if dims.first() == Some(&1) {
            dims[0] = items.len();
        } else {
            dims.insert(0, items.len());
        }
        Self::new(&dims, data)
    }
}
