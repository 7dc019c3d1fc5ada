use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-wise softmax of `[B, K]` logits, max-subtracted.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.ndim() != 2 {
        return Err(Error::Config(format!(
            "softmax expects [B, K], got {:?}",
            logits.shape()
        )));
    }
    let k = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum = exps.iter().fold(T::zero(), |a, &v| a + v);
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean cross-entropy over the batch and its gradient `(softmax − onehot)/B`.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::Input(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!("label {bad} outside [0, {k})")));
    }
    let inv_b = T::one() / T::from_usize_lossy(b);
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(b * k);
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
        let log_z = max + sum.ln();
        loss += (log_z - row[label]).to_f64_lossy();
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            let onehot = if j == label { T::one() } else { T::zero() };
            grad.push((p - onehot) * inv_b);
        }
    }
    Ok((T::from_f64_lossy(loss / b as f64), Tensor::new(vec![b, k], grad)?))
}
