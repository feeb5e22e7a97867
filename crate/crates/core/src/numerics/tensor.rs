//! Dense row-major tensors and the element-precision trait shared by the
//! evaluation, gradient, and finite-difference passes.

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use super::NumericsError;

/// Floating-point element type for tensor computation. Training runs in
/// `f32`; tests and the finite-difference checker run in `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Convert an `f64` constant into the active precision.
pub fn real<R: Real>(x: f64) -> R {
    R::from_f64(x).expect("constant not representable")
}

/// Sum in a fixed left-to-right pairwise tree so the result cannot depend
/// on an execution schedule.
pub fn pairwise_sum<R: Real>(values: &[R]) -> R {
    const LEAF: usize = 8;
    if values.len() <= LEAF {
        let mut acc = R::zero();
        for &v in values {
            acc = acc + v;
        }
        acc
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Immutable dense tensor with row-major storage.
///
/// All entries are finite by construction; shape extents are positive.
#[derive(Clone, PartialEq)]
pub struct Tensor<R: Real> {
    shape: Vec<usize>,
    values: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, values: Vec<R>) -> Result<Self, NumericsError> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(NumericsError::InvalidShape(format!("{shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(NumericsError::InvalidShape(format!(
                "shape {shape:?} wants {expected} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFiniteValue("tensor construction".into()));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, values: vec![R::zero(); n] }
    }

    pub fn filled(shape: Vec<usize>, value: R) -> Result<Self, NumericsError> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: R) -> Result<Self, NumericsError> {
        Self::new(vec![1, 1], vec![value])
    }

    /// 2-D constructor from rows.
    pub fn from_rows(rows: &[Vec<R>]) -> Result<Self, NumericsError> {
        if rows.is_empty() {
            return Err(NumericsError::InvalidShape("no rows".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericsError::InvalidShape("ragged rows".into()));
        }
        let values = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[R] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        debug_assert!(self.shape.len() == 2);
        self.shape[1]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn get2(&self, row: usize, col: usize) -> R {
        debug_assert!(self.is_matrix());
        self.values[row * self.shape[1] + col]
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        Self::new(shape, self.values.clone())
    }

    /// Convert between precisions through `f64`.
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        let values = self
            .values
            .iter()
            .map(|v| S::from_f64(v.to_f64().unwrap()).unwrap())
            .collect();
        Tensor { shape: self.shape.clone(), values }
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Result<Self, NumericsError> {
        Self::new(self.shape.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    /// Row `i` of a 2-D tensor as a 1×cols tensor.
    pub fn row(&self, i: usize) -> Result<Self, NumericsError> {
        let c = self.cols();
        Self::new(vec![1, c], self.values[i * c..(i + 1) * c].to_vec())
    }
}

impl<R: Real> fmt::Debug for Tensor<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn rejects_shape_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn pairwise_sum_matches_sequential() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64) * 0.25).collect();
        let seq: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - seq).abs() < 1e-9);
    }

    #[test]
    fn pairwise_sum_is_deterministic() {
        let xs: Vec<f64> = (0..317).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        assert_eq!(pairwise_sum(&xs).to_bits(), pairwise_sum(&xs).to_bits());
    }
}
