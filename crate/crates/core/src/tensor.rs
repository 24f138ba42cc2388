//! Dense row-major n-dimensional tensor.
//!
//! Element storage is immutable and shared (`Arc`), so clones are cheap and
//! a tensor captured by the gradient tape can never be mutated behind the
//! tape's back. A tensor optionally carries a handle to the tape node that
//! produced it; plain tensors (no handle) are treated as constants when they
//! meet a tape op.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::NodeRef;

/// Dense row-major tensor with shared immutable storage.
#[derive(Clone)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Arc<[F]>,
    pub(crate) node: Option<NodeRef>,
    requires_grad: bool,
}

impl<F: Scalar> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.len() <= 8 {
            write!(f, " {:?}", self.as_slice())?;
        }
        Ok(())
    }
}

/// Row-major strides for a shape. The empty shape (a scalar) has no strides.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Number of elements implied by a shape (1 for the scalar shape `[]`).
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Tensor<F> {
    /// Builds a tensor from a shape and row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: data.into(),
            node: None,
            requires_grad: false,
        })
    }

    /// All-zero tensor.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, F::zero())
    }

    /// All-one tensor.
    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, F::one())
    }

    /// Constant-filled tensor.
    pub fn filled(shape: &[usize], v: F) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; numel(shape)].into(),
            node: None,
            requires_grad: false,
        }
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(v: F) -> Self {
        Self {
            shape: vec![],
            data: vec![v].into(),
            node: None,
            requires_grad: false,
        }
    }

    /// Marks the tensor as a trainable leaf when it is placed on a tape.
    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    /// Whether the tensor asks to be a trainable leaf.
    pub fn wants_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.data.to_vec()
    }

    pub(crate) fn data_arc(&self) -> Arc<[F]> {
        Arc::clone(&self.data)
    }

    pub(crate) fn from_arc(shape: Vec<usize>, data: Arc<[F]>, node: Option<NodeRef>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data,
            node,
            requires_grad: false,
        }
    }

    /// Value of a rank-0 or single-element tensor.
    ///
    /// Panics when the tensor holds more than one element.
    pub fn item(&self) -> F {
        assert_eq!(self.len(), 1, "item() requires a single-element tensor");
        self.data[0]
    }

    /// Element at a multi-index.
    pub fn get(&self, idx: &[usize]) -> F {
        self.data[self.flat_index(idx)]
    }

    /// Row-major flat offset of a multi-index (bounds-checked).
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.rank(), "index rank mismatch");
        let strides = strides_of(&self.shape);
        let mut off = 0;
        for (d, (&i, &s)) in idx.iter().zip(strides.iter()).enumerate() {
            assert!(i < self.shape[d], "index {} out of bounds on axis {}", i, d);
            off += i * s;
        }
        off
    }

    /// Same data viewed under a new shape with equal element count.
    /// The view is detached from any tape; the differentiable reshape lives
    /// in [`crate::ops::reshape`].
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.len(),
                shape,
                numel(shape)
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            node: None,
            requires_grad: false,
        })
    }

    /// Same values with any tape linkage dropped: the result acts as a
    /// constant (no gradient flows into it) when used in tape ops.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
            requires_grad: false,
        }
    }

    /// Elementwise map into a new detached tensor.
    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect::<Vec<_>>().into(),
            node: None,
            requires_grad: false,
        }
    }

    /// Largest absolute elementwise difference between two same-shape tensors.
    pub fn max_abs_diff(&self, other: &Self) -> F {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(F::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
