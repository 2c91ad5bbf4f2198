use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Real;
use crate::error::{ensure, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a tensor allocation, used by the tape to bind leaves.
#[derive(Debug, Copy, Clone, PartialEq, Eq, Hash)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Dense row-major array with an optional gradient slot.
///
/// Every tensor carries a [`TensorId`]. Cloning allocates a fresh id, so a
/// clone is a distinct leaf when bound onto a [`Tape`](super::Tape).
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    id: TensorId,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, checking extents, length, and finiteness.
    pub fn new(shape: impl Into<Vec<usize>>, values: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        ensure!(
            shape.iter().all(|&e| e > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        let numel: usize = shape.iter().product();
        ensure!(
            numel == values.len(),
            "shape {shape:?} needs {numel} values, got {}",
            values.len()
        );
        ensure!(values.iter().all(|v| v.is_finite()), "tensor values must be finite");
        Ok(Self::from_parts(shape, values))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            shape,
            values,
            grad: None,
            requires_grad: false,
            id: TensorId::fresh(),
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::from_parts(shape, vec![value; numel])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    /// Builds a `rows × cols` matrix.
    pub fn matrix(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        ensure!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
        ensure!(
            rows.iter().all(|r| r.len() == cols),
            "from_rows needs rows of equal length"
        );
        Self::matrix(rows.len(), cols, rows.concat())
    }

    /// Entries drawn from N(0, std²).
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        let values = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Self::from_parts(shape, values)
    }

    /// Entries drawn from U(lo, hi).
    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        let values = (0..numel).map(|_| T::from_f64(rng.random_range(lo..=hi))).collect();
        Self::from_parts(shape, values)
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// Leading extent (1 for scalars).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Trailing extent (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        ensure!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        Ok(self.values[0])
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        ensure!(
            shape.iter().product::<usize>() == self.values.len() && shape.iter().all(|&e| e > 0),
            "cannot reshape {:?} to {shape:?}",
            self.shape
        );
        self.shape = shape;
        Ok(self)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.set_requires_grad(on);
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        ensure!(
            g.len() == self.values.len(),
            "gradient length {} does not match tensor length {}",
            g.len(),
            self.values.len()
        );
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Converts element type.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.values.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        )
    }

    /// Copies rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        ensure!(
            self.is_matrix() && start < end && end <= self.rows(),
            "slice_rows({start}, {end}) on shape {:?}",
            self.shape
        );
        let c = self.cols();
        Ok(Self::from_parts(
            vec![end - start, c],
            self.values[start * c..end * c].to_vec(),
        ))
    }

    /// Gathers the listed rows of a matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        ensure!(self.is_matrix(), "select_rows needs a matrix");
        ensure!(!indices.is_empty(), "select_rows needs at least one index");
        let c = self.cols();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            ensure!(i < self.rows(), "row {i} out of range for {} rows", self.rows());
            out.extend_from_slice(self.row(i));
        }
        Ok(Self::from_parts(vec![indices.len(), c], out))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        ensure!(!parts.is_empty(), "concat_rows needs at least one part");
        let c = parts[0].cols();
        ensure!(
            parts.iter().all(|p| p.is_matrix() && p.cols() == c),
            "concat_rows needs matrices with equal column counts"
        );
        let rows = parts.iter().map(|p| p.rows()).sum();
        let values = parts.iter().flat_map(|p| p.values.iter().copied()).collect();
        Ok(Self::from_parts(vec![rows, c], values))
    }

    /// Largest absolute element-wise difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        ensure!(
            self.shape == other.shape,
            "shape mismatch {:?} vs {:?}",
            self.shape,
            other.shape
        );
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.clone(),
            grad: self.grad.clone(),
            requires_grad: self.requires_grad,
            id: TensorId::fresh(),
        }
    }
}

/// Equality compares shape and values only.
impl<T: Real> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.values == other.values
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.values.iter().take(8).map(|v| v.as_f64()).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("values", &preview)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(Tensor::new(vec![2, 2], vec![0.0f32; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], Vec::<f32>::new()).is_err());
        assert!(Tensor::new(vec![1], vec![f32::NAN]).is_err());
        assert!(Tensor::new(vec![1], vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn clone_gets_fresh_identity() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = a.clone();
        assert_ne!(a.id(), b.id());
        assert_eq!(a, b);
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::<f32>::zeros(vec![2]).with_requires_grad(true);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, 0.5]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }
}
