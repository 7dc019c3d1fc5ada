use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TensorSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor applied to a channel's standard deviation before dividing by it.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel mean and population standard deviation of `value / 255`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stats: Self = serde_json::from_str(&text)?;
        if stats.mean.len() != stats.std.len() || stats.mean.is_empty() {
            return Err(Error::format(
                "stats",
                "mean and std must be nonempty and of equal length",
            ));
        }
        Ok(stats)
    }
}

pub fn compute_stats(dataset: &Dataset) -> Result<ChannelStats> {
    if dataset.is_empty() {
        return Err(Error::Input("cannot compute statistics of an empty dataset".into()));
    }
    let [c, h, w] = dataset.image_shape;
    let plane = h * w;
    let count = (dataset.len() * plane) as f64;
    let mut mean = vec![0.0f64; c];
    for i in 0..dataset.len() {
        for (ch, values) in dataset.image(i).chunks_exact(plane).enumerate() {
            mean[ch] += values.iter().map(|&v| v as f64 / 255.0).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0f64; c];
    for i in 0..dataset.len() {
        for (ch, values) in dataset.image(i).chunks_exact(plane).enumerate() {
            var[ch] += values
                .iter()
                .map(|&v| (v as f64 / 255.0 - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    let std = var.into_iter().map(|v| (v / count).sqrt()).collect();
    Ok(ChannelStats { mean, std })
}

/// `(value / 255 − mean) / max(std, 1e-8)` per channel.
pub fn preprocess<T: Scalar>(dataset: &Dataset, stats: &ChannelStats) -> Result<TensorSet<T>> {
    let [c, h, w] = dataset.image_shape;
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::Config(format!(
            "statistics cover {} channels, images have {c}",
            stats.mean.len()
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Input("cannot preprocess an empty dataset".into()));
    }
    let plane = h * w;
    let scale: Vec<f64> = stats.std.iter().map(|&s| 1.0 / s.max(STD_FLOOR)).collect();
    let data = dataset
        .pixels
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / plane) % c;
            T::from_f64_lossy((v as f64 / 255.0 - stats.mean[ch]) * scale[ch])
        })
        .collect();
    Ok(TensorSet {
        x: Tensor::new(vec![dataset.len(), c, h, w], data)?,
        labels: dataset.labels.clone(),
    })
}
