//! Dense row-major tensors.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type usable in tensors and tapes.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense n-dimensional array stored row-major.
///
/// Public constructors reject non-finite entries; `shape.iter().product()`
/// always equals `data.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub type Tensor64 = Tensor<f64>;

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                context: "tensor construction",
                expected: shape,
                actual: vec![data.len()],
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite entry {:?} at flat index {i}",
                data[i]
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor without the finiteness scan. Shape must be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn scalar(v: T) -> Result<Self> {
        Tensor::new(vec![], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![T::zero(); n])
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// True for rank-0 tensors and any tensor holding exactly one element.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "expected a scalar tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        )
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Checks that `self` is a vector of length `n`.
    pub fn expect_vector(&self, n: usize, context: &'static str) -> Result<()> {
        if self.shape.len() == 1 && self.shape[0] == n {
            Ok(())
        } else {
            Err(Error::Shape {
                context,
                expected: vec![n],
                actual: self.shape.clone(),
            })
        }
    }
}

impl From<Vec<f32>> for Tensor<f32> {
    /// Wraps a vector without the finiteness scan; intended for test code
    /// and internal plumbing where data is already validated.
    fn from(data: Vec<f32>) -> Self {
        Tensor::from_parts(vec![data.len()], data)
    }
}
