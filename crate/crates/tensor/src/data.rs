use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Immutable dense row-major buffer plus its shape.
///
/// Cloning is cheap (the buffer is shared). Plain data never participates in a tape,
/// which is what lets weight sets be shared across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData<T> {
    shape: Arc<[usize]>,
    data: Arc<[T]>,
}

impl<T: Scalar> TensorData<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected = numel(shape);
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.into(),
            data: data.into(),
        })
    }

    pub(crate) fn from_parts(shape: &[usize], data: Vec<T>) -> Self {
        debug_assert_eq!(numel(shape), data.len());
        Self {
            shape: shape.into(),
            data: data.into(),
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self::from_parts(shape, vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(&[], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    /// Same buffer, new shape. Element count must match.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected: numel(shape),
                actual: self.len(),
            });
        }
        Ok(Self {
            shape: shape.into(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self::from_parts(
            &self.shape,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    /// Elementwise conversion to another precision.
    pub fn cast<U: Scalar>(&self) -> TensorData<U> {
        TensorData::from_parts(
            &self.shape,
            self.data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        )
    }

    /// True when both buffers hold exactly the same bits.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64_lossy().to_bits() == b.to_f64_lossy().to_bits())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
