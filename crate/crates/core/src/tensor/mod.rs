//! Dense `f64` tensors and a small reverse-mode autodiff engine.
//!
//! Everything the rest of the crate differentiates through lives here:
//! convolution, ReLU, 2x2 max-pooling, fully connected layers, softmax and the
//! handful of reductions used to build losses. Graphs are declared first and
//! then evaluated with [`Graph::forward`], so the same graph can be re-run with
//! new inputs or perturbed parameters (which is what [`grad_check`] does).

mod graph;
mod gradcheck;
mod kernels;
mod optim;

pub use graph::{Graph, NodeId, Reduction};
pub use gradcheck::{grad_check, BlockReport, GradCheckReport};
pub use optim::{OptimizerKind, OptimizerState};
pub use kernels::softmax_rows;

use crate::error::{Error, Result};

/// Row-major n-dimensional array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if expected != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("gradient buffer", &[self.data.len()], &[grad.len()]));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &[self.data.len()], &[n]));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Empty("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// Slice `index` out of the leading axis.
    pub fn row(&self, index: usize) -> Result<Tensor> {
        let rows = *self
            .shape
            .first()
            .ok_or_else(|| Error::InvalidArgument("row() on a scalar".into()))?;
        if index >= rows {
            return Err(Error::InvalidArgument(format!(
                "row {index} out of range for {rows} rows"
            )));
        }
        let stride = self.data.len() / rows;
        let shape = if self.shape.len() == 1 {
            Vec::new()
        } else {
            self.shape[1..].to_vec()
        };
        Ok(Tensor {
            shape,
            data: self.data[index * stride..(index + 1) * stride].to_vec(),
            grad: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn row_slice(&self, index: usize) -> &[f64] {
        let stride = self.data.len() / self.rows();
        &self.data[index * stride..(index + 1) * stride]
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        let t = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn grad_buffer_must_match() {
        let mut t = Tensor::zeros(&[4]);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0; 4]);
    }

    #[test]
    fn stack_and_row_roundtrip() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.row(1).unwrap(), b);
        assert_eq!(s.row_slice(0), &[1.0, 2.0]);
    }
}
