use crate::error::{Error, Result};
use crate::nn::spec::window_output;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    input_shape: Vec<usize>,
    /// Flat input index of the winning element for every output element.
    argmax: Vec<usize>,
}

/// Max pooling with implicit `-inf` padding. Ties go to the first element in
/// row-major window order.
pub fn maxpool_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, MaxPoolCache)> {
    let [b, c, h, w] = input.dims4()?;
    let (ho, wo) = match (
        window_output(h, kernel, stride, padding),
        window_output(w, kernel, stride, padding),
    ) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::Config(format!(
                "{kernel}x{kernel} pool does not fit {h}x{w} input"
            )))
        }
    };
    let data = input.data();
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut argmax = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_idx == usize::MAX || data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((
        Tensor::new(vec![b, c, ho, wo], out)?,
        MaxPoolCache {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool_backward<T: Scalar>(cache: &MaxPoolCache, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.len() != cache.argmax.len() {
        return Err(Error::Config("maxpool grad_out does not match forward output".into()));
    }
    let mut grad = Tensor::zeros(&cache.input_shape);
    let g = grad.data_mut();
    for (&idx, &v) in cache.argmax.iter().zip(grad_out.data()) {
        g[idx] += v;
    }
    Ok(grad)
}

/// `[B,C,H,W] → [B,C]` spatial mean.
pub fn global_avg_pool_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = input.dims4()?;
    let hw = h * w;
    let scale = T::one() / T::from_usize_lossy(hw);
    let out = input
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) * scale)
        .collect();
    Tensor::new(vec![b, c], out)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let hw = input_shape[2] * input_shape[3];
    let scale = T::one() / T::from_usize_lossy(hw);
    let mut data = Vec::with_capacity(grad_out.len() * hw);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * scale, hw));
    }
    Tensor::new(input_shape.to_vec(), data)
}
