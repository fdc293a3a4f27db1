//! Dense f64 tensor value type.

use crate::error::{Error, Result};

/// An n-dimensional f64 array in row-major order.
///
/// Tensors are plain values; differentiation happens on a [`crate::autodiff::Tape`],
/// which copies tensor values into its own arena. The `grad` buffer exists so
/// optimizers can accumulate per-parameter gradients read back from a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor from raw values. Fails if the element count does not
    /// match the shape or any value is non-finite.
    pub fn from_vec(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite value {} at flat index {}",
                values[bad], bad
            )));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Mark this tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Accumulate a gradient buffer into this tensor (+=), allocating on
    /// first use.
    pub fn accumulate_grad(&mut self, grad: &[f64]) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::Contract(format!(
                "gradient length {} does not match tensor length {}",
                grad.len(),
                self.values.len()
            )));
        }
        match &mut self.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(grad) {
                    *gi += di;
                }
            }
            None => self.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Number of rows when viewed as a 2-D matrix (product of all leading dims).
    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Size of the last dimension, or total length for 0/1-D tensors.
    pub fn cols(&self) -> usize {
        match self.shape.last() {
            Some(&c) if self.shape.len() >= 2 => c,
            _ => self.values.len(),
        }
    }

    /// Error if any element is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if let Some(bad) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "{what}: non-finite value {} at flat index {}",
                self.values[bad], bad
            )));
        }
        Ok(())
    }
}
