//! Datasets of raw `[C, H, W]` images in the 0–255 domain, plus their
//! normalized tensor form.

pub mod cache;
pub mod cifar;
pub mod preprocess;
pub mod split;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::distortion::DistortionSpec;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use cache::{read_dataset, write_dataset};
pub use cifar::{load_cifar10, load_cifar100, CifarPart, LoadOptions};
pub use preprocess::{compute_stats, preprocess, ChannelStats};
pub use split::{split, SplitSpec};

pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub(crate) fn code(self) -> u8 {
        match self {
            SplitTag::Train => 0,
            SplitTag::Val => 1,
            SplitTag::Test => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SplitTag::Train),
            1 => Some(SplitTag::Val),
            2 => Some(SplitTag::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub source: String,
    pub distortion: Option<DistortionSpec>,
}

/// Images with labels and stable per-image identifiers.
///
/// `ids` survive subsetting and distortion, so a distorted image can always
/// be traced back to its clean source.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image_shape: [usize; 3],
    /// `len() * image_shape.product()` values in [0, 255].
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    pub class_count: usize,
    pub split: SplitTag,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(
        image_shape: [usize; 3],
        pixels: Vec<f32>,
        labels: Vec<usize>,
        ids: Vec<u64>,
        class_count: usize,
        split: SplitTag,
        provenance: Provenance,
    ) -> Result<Self> {
        let ds = Self {
            image_shape,
            pixels,
            labels,
            ids,
            class_count,
            split,
            provenance,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.image_len();
        if d == 0 || self.class_count == 0 {
            return Err(Error::Input(
                "dataset needs a nonzero image shape and class count".into(),
            ));
        }
        let n = self.labels.len();
        if self.pixels.len() != n * d || self.ids.len() != n {
            return Err(Error::Input(format!(
                "dataset fields disagree: {} labels, {} ids, {} pixel values for {d}-value images",
                n,
                self.ids.len(),
                self.pixels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.class_count) {
            return Err(Error::Input(format!("label {bad} outside [0, {})", self.class_count)));
        }
        if self.pixels.iter().any(|v| !(0.0..=255.0).contains(v)) {
            return Err(Error::Input("pixel values must lie in [0, 255]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let d = self.image_len();
        &self.pixels[i * d..(i + 1) * d]
    }

    /// The images at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let d = self.image_len();
        let mut pixels = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            image_shape: self.image_shape,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            class_count: self.class_count,
            split: self.split,
            provenance: self.provenance.clone(),
        }
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    /// Per-class image counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Normalized images as a `[N, C, H, W]` tensor with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSet<T> {
    pub x: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> TensorSet<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> TensorSet<T> {
        TensorSet {
            x: self.x.select_batch(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}
