//! Dense tensors and a reverse-mode gradient tape.
//!
//! Values live in row-major `Vec`s. A [`Tape`] records every operation
//! applied to [`Var`] handles; [`Tape::backward`] replays the record in
//! reverse and returns the gradients of all leaves that asked for one.

mod kernels;
mod real;
mod tape;

pub use kernels::{rotary_angle, AttentionSpec};
pub use real::{gemm, MatMut, MatRef, Precision, Real};
pub use tape::{Gradients, Tape, Var};

use crate::error::{bail, Result};

/// Epsilon added to the mean square inside RMS normalization.
pub const RMS_EPS: f64 = 1e-6;

/// A dense n-dimensional array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.contains(&0) {
            bail!(Dimension, "zero-sized dimension in shape {shape:?}");
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            bail!(Dimension, "shape {shape:?} holds {n} elements, got {}", data.len());
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); n], requires_grad: false, grad: None }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| F::of(v)).collect())
    }

    pub fn scalar(value: F) -> Self {
        Tensor { shape: Vec::new(), data: vec![value], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
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

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<F>) -> Result<()> {
        if grad.len() != self.data.len() {
            bail!(Dimension, "gradient length {} != tensor length {}", grad.len(), self.data.len());
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<F>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Element of a 2-d tensor.
    pub fn at2(&self, row: usize, col: usize) -> F {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self.grad.as_ref().map(|g| g.iter().map(|v| G::of(v.f64())).collect()),
        }
    }

    /// Rows `idx` of a 2-d tensor, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        if self.shape.len() != 2 {
            bail!(Dimension, "select_rows needs a 2-d tensor, got {:?}", self.shape);
        }
        let cols = self.shape[1];
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            if r >= self.shape[0] {
                bail!(Dimension, "row {r} out of range for {:?}", self.shape);
            }
            data.extend_from_slice(&self.data[r * cols..(r + 1) * cols]);
        }
        Tensor::new(vec![idx.len(), cols], data)
    }

    /// Columns `idx` of a 2-d tensor (or entries of a 1-d tensor).
    pub fn select_cols(&self, idx: &[usize]) -> Result<Self> {
        let cols = self.cols();
        if let Some(&bad) = idx.iter().find(|&&c| c >= cols) {
            bail!(Dimension, "column {bad} out of range for {:?}", self.shape);
        }
        match self.shape.len() {
            1 => Tensor::new(vec![idx.len()], idx.iter().map(|&c| self.data[c]).collect()),
            2 => {
                let mut data = Vec::with_capacity(self.shape[0] * idx.len());
                for row in self.data.chunks(cols) {
                    data.extend(idx.iter().map(|&c| row[c]));
                }
                Tensor::new(vec![self.shape[0], idx.len()], data)
            }
            _ => bail!(Dimension, "select_cols needs a 1-d or 2-d tensor, got {:?}", self.shape),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn grad_length_checked() {
        let mut t = Tensor::<f64>::zeros(&[3]);
        assert!(t.set_grad(vec![0.0; 2]).is_err());
        t.set_grad(vec![1.0; 3]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn row_and_column_selection() {
        let t = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(t.select_rows(&[1]).unwrap().data(), &[4., 5., 6.]);
        assert_eq!(t.select_cols(&[2, 0]).unwrap().data(), &[3., 1., 6., 4.]);
        assert!(t.select_cols(&[3]).is_err());
    }
}
