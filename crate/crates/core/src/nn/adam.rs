use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::param::Param;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based).
///
/// Elements whose channel is masked out keep their value and both moment
/// estimates untouched.
pub fn adam_step<T: Scalar>(params: &mut [&mut Param<T>], hyper: &AdamHyper, t: u64) -> Result<()> {
    hyper.validate()?;
    if t == 0 {
        return Err(Error::Usage("Adam step index starts at 1".into()));
    }
    let b1 = hyper.beta1;
    let b2 = hyper.beta2;
    let bc1 = 1.0 - b1.powi(t.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - b2.powi(t.min(i32::MAX as u64) as i32);
    let (b1t, b2t) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
    let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - b1), T::from_f64_lossy(1.0 - b2));
    let (inv_bc1, inv_bc2) = (T::from_f64_lossy(1.0 / bc1), T::from_f64_lossy(1.0 / bc2));
    let lr = T::from_f64_lossy(hyper.learning_rate);
    let eps = T::from_f64_lossy(hyper.epsilon);

    for (pi, param) in params.iter_mut().enumerate() {
        if param.trainable_count() == 0 {
            continue;
        }
        if param.moments.is_none() {
            return Err(Error::Usage(format!("parameter {pi} has uninitialized Adam moments")));
        }
        let block = param.block();
        let flags: Option<Vec<bool>> = match param.trainability() {
            crate::nn::param::Trainability::Channels(f) => Some(f.clone()),
            _ => None,
        };
        let Param {
            value, grad, moments, ..
        } = &mut **param;
        let moments = moments.as_mut().expect("checked above");
        let values = value.data_mut();
        let grads = grad.data();
        for i in 0..values.len() {
            if let Some(flags) = &flags {
                if !flags[i / block] {
                    continue;
                }
            }
            let g = grads[i];
            let m = b1t * moments.m[i] + one_b1 * g;
            let v = b2t * moments.v[i] + one_b2 * g * g;
            moments.m[i] = m;
            moments.v[i] = v;
            let m_hat = m * inv_bc1;
            let v_hat = v * inv_bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
