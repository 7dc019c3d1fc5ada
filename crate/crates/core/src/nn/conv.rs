//! 2-D convolution (cross-correlation, no kernel flip) via im2col + GEMM.

use crate::error::{Error, Result};
use crate::nn::spec::window_output;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "convolution needs k >= 1 and s >= 1 (got k={kernel}, s={stride})"
            )));
        }
        let out_height = window_output(height, kernel, stride, padding);
        let out_width = window_output(width, kernel, stride, padding);
        match (out_height, out_width) {
            (Some(out_height), Some(out_width)) => Ok(Self {
                channels,
                height,
                width,
                kernel,
                stride,
                padding,
                out_height,
                out_width,
            }),
            _ => Err(Error::Config(format!(
                "{kernel}x{kernel} kernel with padding {padding} does not fit a {height}x{width} input"
            ))),
        }
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Unfolds one `[C, H, W]` image into a `[C·k·k, H'·W']` column matrix.
pub(crate) fn im2col<T: Scalar>(image: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_height {
                    let iy = (oy * s) as isize + ky as isize - p;
                    let out_row = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s) as isize + kx as isize - p;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into the image.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, image: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_height {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_width {
                        let ix = (ox * s) as isize + kx as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

/// State retained by [`conv2d_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    pub(crate) input: Tensor<T>,
    pub(crate) geometry: ConvGeometry,
}

fn check_weights<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize)> {
    let [_, c, _, _] = input.dims4()?;
    let [f, wc, kh, kw] = weights.dims4()?;
    if wc != c {
        return Err(Error::Config(format!("input has {c} channels but weights expect {wc}")));
    }
    if kh != kw {
        return Err(Error::Config(format!("non-square kernel {kh}x{kw}")));
    }
    if bias.shape() != [f] {
        return Err(Error::Config(format!(
            "bias shape {:?} does not match {f} filters",
            bias.shape()
        )));
    }
    Ok((f, kh))
}

/// `[B,C,H,W] ⋆ [F,C,k,k] + bias → [B,F,H',W']`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let (f, k) = check_weights(input, weights, bias)?;
    let [b, c, h, w] = input.dims4()?;
    let g = ConvGeometry::new(c, h, w, k, stride, padding)?;
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); b * f * ncols];
    let mut cols = vec![T::zero(); rows * ncols];
    let in_per = c * h * w;
    for (bi, out_b) in out.chunks_exact_mut(f * ncols).enumerate() {
        im2col(&input.data()[bi * in_per..(bi + 1) * in_per], &g, &mut cols);
        for (fi, row) in out_b.chunks_exact_mut(ncols).enumerate() {
            row.fill(bias.data()[fi]);
        }
        T::gemm(
            f,
            rows,
            ncols,
            T::one(),
            weights.data(),
            false,
            &cols,
            false,
            T::one(),
            out_b,
        );
    }
    let out = Tensor::new(vec![b, f, g.out_height, g.out_width], out)?;
    out.check_finite("conv2d output")?;
    Ok((
        out,
        ConvCache {
            input: input.clone(),
            geometry: g,
        },
    ))
}

/// Gradients of a scalar loss with respect to input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    cache: Option<&ConvCache<T>>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let cache = cache.ok_or_else(|| Error::Usage("conv2d backward called without a forward cache".into()))?;
    let g = cache.geometry;
    let [b, _, _, _] = cache.input.dims4()?;
    let f = weights.shape()[0];
    if grad_out.shape() != [b, f, g.out_height, g.out_width] {
        return Err(Error::Config(format!(
            "grad_out shape {:?} does not match forward output [{b}, {f}, {}, {}]",
            grad_out.shape(),
            g.out_height,
            g.out_width
        )));
    }
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let in_per = g.channels * g.height * g.width;
    let mut grad_in = vec![T::zero(); b * in_per];
    let mut grad_w = vec![T::zero(); weights.len()];
    let mut grad_b = vec![T::zero(); f];
    let mut cols = vec![T::zero(); rows * ncols];
    let mut dcols = vec![T::zero(); rows * ncols];
    for bi in 0..b {
        let go = &grad_out.data()[bi * f * ncols..(bi + 1) * f * ncols];
        for (fi, row) in go.chunks_exact(ncols).enumerate() {
            grad_b[fi] += row.iter().fold(T::zero(), |acc, &v| acc + v);
        }
        im2col(&cache.input.data()[bi * in_per..(bi + 1) * in_per], &g, &mut cols);
        // dW += go · colsᵀ
        T::gemm(f, ncols, rows, T::one(), go, false, &cols, true, T::one(), &mut grad_w);
        // dcols = Wᵀ · go
        T::gemm(
            rows,
            f,
            ncols,
            T::one(),
            weights.data(),
            true,
            go,
            false,
            T::zero(),
            &mut dcols,
        );
        col2im(&dcols, &g, &mut grad_in[bi * in_per..(bi + 1) * in_per]);
    }
    Ok((
        Tensor::new(cache.input.shape().to_vec(), grad_in)?,
        Tensor::new(weights.shape().to_vec(), grad_w)?,
        Tensor::new(vec![f], grad_b)?,
    ))
}
