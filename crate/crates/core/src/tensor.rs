//! Dense row-major tensors.
//!
//! `Tensor` is a plain value type: shape plus data. Gradients and the
//! `requires_grad` flag live on tape nodes (see [`crate::autodiff`]),
//! which pair a value tensor with an optional same-shape gradient buffer.
//!
//! Invariants enforced at construction: `product(shape) == data.len()`,
//! no zero-length axes, and all stored values finite.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    /// Checked constructor: validates the shape/data contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor::new", "zero-length axis"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor::new",
                format!("shape {:?} implies {} values, got {}", shape, n, data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor::new" });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for values produced by trusted code paths.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![F::zero(); n])
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn scalar(v: F) -> Self {
        Tensor::from_parts(vec![1], vec![v])
    }

    /// Builds an `n x c` matrix from rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::shape("tensor::from_rows", "no rows"));
        }
        let c = rows[0].len();
        let mut data = Vec::with_capacity(n * c);
        for r in rows {
            if r.len() != c {
                return Err(Error::shape("tensor::from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![n, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar extraction; panics if the tensor has more than one element.
    pub fn item(&self) -> F {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    /// Rows of a 2-d tensor (a 1-d tensor counts as a single row).
    pub fn nrows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("nrows on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn ncols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("ncols on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.ncols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Squared Euclidean distance between two rows of equal width.
    pub fn row_distance(&self, i: usize, j: usize) -> F {
        let (a, b) = (self.row(i), self.row(j));
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<F>()
            .sqrt()
    }

    /// Stacks selected rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor<F> {
        let c = self.ncols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::from_parts(vec![idx.len(), c], data)
    }

    /// Vertically concatenates two matrices of equal width.
    pub fn vstack(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        if self.ncols() != other.ncols() {
            return Err(Error::shape("tensor::vstack", "column count mismatch"));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Tensor::from_parts(
            vec![self.nrows() + other.nrows(), self.ncols()],
            data,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0]).is_err());
        assert!(Tensor::new(vec![0], Vec::<f64>::new()).is_err());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0f64, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0f64, f64::INFINITY]).is_err());
    }

    #[test]
    fn row_access_and_stacking() {
        let a = Tensor::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(a.row(1), &[3.0, 4.0]);
        let b = a.select_rows(&[1, 0, 1]);
        assert_eq!(b.shape(), &[3, 2]);
        assert_eq!(b.row(0), &[3.0, 4.0]);
        let c = a.vstack(&b).unwrap();
        assert_eq!(c.nrows(), 5);
    }

    #[test]
    fn row_distance_matches_hand_value() {
        let a = Tensor::from_rows(&[vec![0.0f64, 0.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(a.row_distance(0, 1), 5.0);
    }
}
