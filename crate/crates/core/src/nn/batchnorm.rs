//! Per-channel batch normalization over `[B, C, H, W]` activations.

use crate::error::{Error, Result};
use crate::nn::param::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    /// When set, training-mode passes normalize with the running statistics
    /// and leave them untouched.
    pub stats_frozen: bool,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
    /// Batch statistics were used (as opposed to running statistics).
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::filled(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
            stats_frozen: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    fn check(&self, input: &Tensor<T>) -> Result<[usize; 4]> {
        let dims = input.dims4()?;
        if dims[1] != self.channels() {
            return Err(Error::Config(format!(
                "batchnorm over {} channels got input with {}",
                self.channels(),
                dims[1]
            )));
        }
        Ok(dims)
    }

    /// Normalizes with the running statistics; never mutates state.
    pub fn forward_eval(&self, input: &Tensor<T>) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        let [_, c, h, w] = self.check(input)?;
        let eps = T::from_f64_lossy(self.eps);
        let inv_std: Vec<T> = self.running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let hw = h * w;
        let mut xhat = Vec::with_capacity(input.len());
        let mut out = Vec::with_capacity(input.len());
        for (i, plane) in input.data().chunks_exact(hw).enumerate() {
            let ch = i % c;
            let (mean, is) = (self.running_mean[ch], inv_std[ch]);
            let (g, b) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            for &x in plane {
                let xh = (x - mean) * is;
                xhat.push(xh);
                out.push(g * xh + b);
            }
        }
        Ok((
            Tensor::new(input.shape().to_vec(), out)?,
            BatchNormCache {
                xhat,
                inv_std,
                shape: input.shape().to_vec(),
                batch_stats: false,
            },
        ))
    }

    /// Training-mode pass: batch statistics, running-statistic update.
    pub fn forward_train(&mut self, input: &Tensor<T>) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        if self.stats_frozen {
            return self.forward_eval(input);
        }
        let [b, c, h, w] = self.check(input)?;
        let hw = h * w;
        let count = b * hw;
        let data = input.data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for (i, plane) in data.chunks_exact(hw).enumerate() {
            mean[i % c] += plane.iter().map(|v| v.to_f64_lossy()).sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for (i, plane) in data.chunks_exact(hw).enumerate() {
            let m = mean[i % c];
            var[i % c] += plane.iter().map(|v| (v.to_f64_lossy() - m).powi(2)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= count as f64);

        let mom = self.momentum;
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        for ch in 0..c {
            let rm = self.running_mean[ch].to_f64_lossy();
            let rv = self.running_var[ch].to_f64_lossy();
            self.running_mean[ch] = T::from_f64_lossy((1.0 - mom) * rm + mom * mean[ch]);
            self.running_var[ch] = T::from_f64_lossy((1.0 - mom) * rv + mom * var[ch] * unbias);
        }

        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::from_f64_lossy(1.0 / (v + self.eps).sqrt()))
            .collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64_lossy(m)).collect();
        let mut xhat = Vec::with_capacity(input.len());
        let mut out = Vec::with_capacity(input.len());
        for (i, plane) in data.chunks_exact(hw).enumerate() {
            let ch = i % c;
            let (g, bt) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            for &x in plane {
                let xh = (x - mean_t[ch]) * inv_std[ch];
                xhat.push(xh);
                out.push(g * xh + bt);
            }
        }
        Ok((
            Tensor::new(input.shape().to_vec(), out)?,
            BatchNormCache {
                xhat,
                inv_std,
                shape: input.shape().to_vec(),
                batch_stats: true,
            },
        ))
    }

    /// Accumulates γ/β gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &BatchNormCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if grad_out.shape() != &cache.shape[..] {
            return Err(Error::Config("batchnorm grad_out does not match forward output".into()));
        }
        let (b, c, hw) = (cache.shape[0], cache.shape[1], cache.shape[2] * cache.shape[3]);
        let g = grad_out.data();
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for (i, (gp, xp)) in g.chunks_exact(hw).zip(cache.xhat.chunks_exact(hw)).enumerate() {
            let ch = i % c;
            for (&gv, &xv) in gp.iter().zip(xp) {
                sum_g[ch] += gv;
                sum_gx[ch] += gv * xv;
            }
        }
        for ch in 0..c {
            self.gamma.grad.data_mut()[ch] += sum_gx[ch];
            self.beta.grad.data_mut()[ch] += sum_g[ch];
        }
        let gamma = self.gamma.value.data();
        let m = T::from_usize_lossy(b * hw);
        let mut out = Vec::with_capacity(g.len());
        for (i, (gp, xp)) in g.chunks_exact(hw).zip(cache.xhat.chunks_exact(hw)).enumerate() {
            let ch = i % c;
            let scale = gamma[ch] * cache.inv_std[ch];
            if cache.batch_stats {
                let (sg, sgx) = (sum_g[ch] / m, sum_gx[ch] / m);
                out.extend(gp.iter().zip(xp).map(|(&gv, &xv)| scale * (gv - sg - xv * sgx)));
            } else {
                out.extend(gp.iter().map(|&gv| scale * gv));
            }
        }
        Tensor::new(cache.shape.clone(), out)
    }
}
