//! Dense row-major `f64` tensors with an optional gradient accumulator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// Builds a 2-D tensor from rows, all of which must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.set_requires_grad(requires_grad);
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        if requires_grad {
            if self.grad.is_none() {
                self.grad = Some(vec![0.0; self.data.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Adds `delta` into the gradient buffer. No-op for tensors that do not require grad.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        let Some(g) = self.grad.as_mut() else {
            return Ok(());
        };
        if g.len() != delta.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[delta.len()]));
        }
        g.iter_mut().zip(delta).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Splits the data and gradient for in-place optimizer updates.
    pub(crate) fn data_and_grad_mut(&mut self) -> (&mut [f64], Option<&[f64]>) {
        (&mut self.data, self.grad.as_deref())
    }

    /// Rounds every element to the nearest `f32`, matching checkpoint storage.
    pub fn round_to_f32(&mut self) {
        self.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let cols = if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            self.data.len()
        };
        self.data.chunks(cols.max(1))
    }

    /// Selects samples (indices along the leading dimension).
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let row: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        if let Some(g) = self.grad.as_mut() {
            g.truncate(numel);
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape { .. })
        ));
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn zero_grad_resets_exactly() {
        let mut t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0])
            .unwrap()
            .with_requires_grad(true);
        t.accumulate_grad(&[0.5, -1.0, 1e300]).unwrap();
        assert_eq!(t.grad().unwrap(), &[0.5, -1.0, 1e300]);
        t.zero_grad();
        assert!(t.grad().unwrap().iter().all(|&g| g == 0.0));
        assert_eq!(t.grad().unwrap().len(), t.numel());
    }

    #[test]
    fn grad_absent_without_requires_grad() {
        let mut t = Tensor::zeros(&[2, 2]);
        assert!(t.grad().is_none());
        t.accumulate_grad(&[1.0; 4]).unwrap();
        assert!(t.grad().is_none());
    }
}
