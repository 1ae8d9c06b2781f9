//! Dense `f64` tensors and a tape-based reverse-mode autodiff engine.
//!
//! Parameters live in [`Tensor`]s owned by the model. A forward pass
//! registers them on a fresh [`Tape`], builds the graph through the tape's
//! primitive methods, and [`Tape::backward`] consumes the tape and returns
//! [`Gradients`] that can be accumulated back into the owning tensors.

mod kernels;
mod tape;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use kernels::Conv2dSpec;
pub use tape::{Gradients, Tape, Var};

/// Dense row-major array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape("tensor", &shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} holds {n} elements but data has {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_slice(data: &[f64]) -> Self {
        Tensor { shape: vec![data.len()], data: data.to_vec(), requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_slice(&[value])
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::dim(
                "accumulate_grad",
                format!("gradient has {} elements, tensor has {}", g.len(), self.data.len()),
            ));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }
}

pub(crate) fn check_shape(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::dim(op, format!("shape {shape:?} must be non-empty with positive dims")));
    }
    Ok(())
}

/// Gauss error function.
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Exact derivative of the error function, `2/sqrt(pi) * exp(-x^2)`.
pub fn erf_derivative(x: f64) -> f64 {
    std::f64::consts::FRAC_2_SQRT_PI * (-x * x).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Maclaurin series, summed until terms fall below 1e-17.
    fn erf_series(x: f64) -> f64 {
        let mut sum = 0.0;
        let mut pow = x; // x^(2n+1) / n!
        let mut n = 0u32;
        loop {
            let term = pow / (2 * n + 1) as f64;
            let signed = if n % 2 == 0 { term } else { -term };
            sum += signed;
            if term.abs() < 1e-17 {
                break;
            }
            n += 1;
            pow *= x * x / n as f64;
        }
        std::f64::consts::FRAC_2_SQRT_PI * sum
    }

    #[test]
    fn erf_matches_series_oracle() {
        assert!((erf(1.0) - erf_series(1.0)).abs() < 1e-14);
        assert!((erf(0.5) - erf_series(0.5)).abs() < 1e-14);
        for i in -300..=300 {
            let x = i as f64 / 100.0;
            assert!((erf(x) - erf_series(x)).abs() < 5e-13, "x={x}");
        }
    }

    #[test]
    fn erf_is_odd_monotone_and_saturates() {
        assert_eq!(erf(0.0), 0.0);
        let mut prev = -1.0;
        for i in -800..=800 {
            let x = i as f64 / 100.0;
            assert_eq!(erf(-x), -erf(x));
            assert!(erf(x) >= prev);
            prev = erf(x);
        }
        for x in [6.0, 7.5, 20.0, 1e3] {
            assert!((erf(x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn erf_derivative_is_closed_form() {
        assert_eq!(erf_derivative(0.0), std::f64::consts::FRAC_2_SQRT_PI);
        let expected = 2.0 / std::f64::consts::PI.sqrt() * (-0.25f64).exp();
        assert!((erf_derivative(0.5) - expected).abs() < 1e-12);
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros(&[2]).with_grad();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, 0.5]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }
}
