//! Owned dense tensors. These live outside the tape: network parameters,
//! prepared batches, anything with a lifetime longer than one forward pass.

use crate::autodiff::rng::Rng;
use crate::autodiff::scalar::Scalar;
use crate::error::{Error, Result};

/// Dense row-major n-dimensional array. `f32` by default; `f64` is used
/// by the gradient-check path.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeLenMismatch {
                op: "tensor",
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// He-normal initialization: N(0, sqrt(2 / fan_in)), zero mean.
    pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..n)
            .map(|_| F::from_f64(rng.next_normal() * std))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: true,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<F>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// In-place SGD update: data -= lr * grad. Errors when no gradient is
    /// present.
    pub fn sgd_update(&mut self, lr: F, name: &str) -> Result<()> {
        let grad = self.grad.as_ref().ok_or_else(|| Error::MissingGradient {
            name: name.to_string(),
        })?;
        for (p, g) in self.data.iter_mut().zip(grad.iter()) {
            *p = *p - lr * *g;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_len() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn he_normal_is_deterministic_and_scaled() {
        let mut r1 = Rng::new(4);
        let mut r2 = Rng::new(4);
        let a = Tensor::<f32>::he_normal(&[64, 64], 64, &mut r1);
        let b = Tensor::<f32>::he_normal(&[64, 64], 64, &mut r2);
        assert_eq!(a.data(), b.data());

        let var: f64 = a.data().iter().map(|x| (x.to_f64()).powi(2)).sum::<f64>()
            / a.numel() as f64;
        let expect = 2.0 / 64.0;
        assert!((var - expect).abs() < expect * 0.2, "var {var} vs {expect}");
    }

    #[test]
    fn sgd_update_applies_and_requires_grad() {
        let mut t = Tensor::<f32>::from_vec(&[1], vec![1.0]).unwrap();
        assert!(t.sgd_update(0.1, "p").is_err());
        t.set_grad(vec![2.0]);
        t.sgd_update(0.1, "p").unwrap();
        assert_eq!(t.data(), &[0.8]);
    }
}
