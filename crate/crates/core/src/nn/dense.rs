use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct DenseCache<T> {
    /// Input flattened to `[B, in]`.
    input: Tensor<T>,
    input_shape: Vec<usize>,
}

/// `y = x·Wᵀ + b` with `W: [out, in]`; any trailing input dims are flattened.
pub fn dense_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, DenseCache<T>)> {
    let b = input.batch();
    let features = input.len() / b;
    let (out_f, in_f) = (weight.shape()[0], weight.shape()[1]);
    if features != in_f {
        return Err(Error::Config(format!(
            "dense layer expects {in_f} input features, got {features}"
        )));
    }
    let mut out = Vec::with_capacity(b * out_f);
    for _ in 0..b {
        out.extend_from_slice(bias.data());
    }
    T::gemm(
        b,
        in_f,
        out_f,
        T::one(),
        input.data(),
        false,
        weight.data(),
        true,
        T::one(),
        &mut out,
    );
    let flat = input.clone().reshape(&[b, in_f])?;
    Ok((
        Tensor::new(vec![b, out_f], out)?,
        DenseCache {
            input: flat,
            input_shape: input.shape().to_vec(),
        },
    ))
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn dense_backward<T: Scalar>(
    cache: &DenseCache<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (out_f, in_f) = (weight.shape()[0], weight.shape()[1]);
    let b = cache.input.batch();
    if grad_out.shape() != [b, out_f] {
        return Err(Error::Config("dense grad_out does not match forward output".into()));
    }
    let mut gw = vec![T::zero(); out_f * in_f];
    T::gemm(
        out_f,
        b,
        in_f,
        T::one(),
        grad_out.data(),
        true,
        cache.input.data(),
        false,
        T::zero(),
        &mut gw,
    );
    let mut gb = vec![T::zero(); out_f];
    for row in grad_out.data().chunks_exact(out_f) {
        for (acc, &v) in gb.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let mut gi = vec![T::zero(); b * in_f];
    T::gemm(
        b,
        out_f,
        in_f,
        T::one(),
        grad_out.data(),
        false,
        weight.data(),
        false,
        T::zero(),
        &mut gi,
    );
    Ok((
        Tensor::new(cache.input_shape.clone(), gi)?,
        Tensor::new(vec![out_f, in_f], gw)?,
        Tensor::new(vec![out_f], gb)?,
    ))
}
