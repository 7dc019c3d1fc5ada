use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Zeroes the gradient wherever the forward input was `<= 0`.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Config("relu grad_out does not match forward input".into()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Inverted dropout: kept activations are scaled by `1/(1-p)`. Returns the
/// per-element multiplier used so the backward pass can replay it.
pub fn dropout_forward<T: Scalar>(input: &Tensor<T>, p: f64, rng: &mut Rng) -> (Tensor<T>, Vec<T>) {
    if p == 0.0 {
        return (input.clone(), vec![T::one(); input.len()]);
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..input.len())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    (Tensor::new(input.shape().to_vec(), data).expect("same shape"), mask)
}

pub fn dropout_backward<T: Scalar>(mask: &[T], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if mask.len() != grad_out.len() {
        return Err(Error::Config("dropout grad_out does not match forward output".into()));
    }
    let data = grad_out.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
    Tensor::new(grad_out.shape().to_vec(), data)
}
