//! Additive white Gaussian noise and Gaussian blur in the 0–255 pixel domain.
//!
//! Images are channel-major `[C, H, W]` slices. Every per-image random stream
//! is keyed by `(spec.seed, image id)`, so the output for one image does not
//! depend on which other images are processed or in what order.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{rng_from, stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistortionKind {
    Awgn,
    Blur,
    Identity,
}

impl std::fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DistortionKind::Awgn => "awgn",
            DistortionKind::Blur => "blur",
            DistortionKind::Identity => "identity",
        })
    }
}

/// `sigma` is the noise standard deviation in pixel units for AWGN and the
/// blur standard deviation in pixels for blur.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

pub const AWGN_PRESETS: [f64; 3] = [5.0, 15.0, 25.0];
pub const BLUR_PRESETS: [f64; 3] = [0.25, 1.25, 2.25];

impl DistortionSpec {
    pub fn identity() -> Self {
        Self {
            kind: DistortionKind::Identity,
            sigma: 0.0,
            seed: 0,
        }
    }

    pub fn awgn(sigma: f64, seed: u64) -> Self {
        Self {
            kind: DistortionKind::Awgn,
            sigma,
            seed,
        }
    }

    pub fn blur(sigma: f64, seed: u64) -> Self {
        Self {
            kind: DistortionKind::Blur,
            sigma,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Config(format!(
                "distortion sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Whether sigma is one of the standard levels for its kind.
    pub fn is_preset(&self) -> bool {
        match self.kind {
            DistortionKind::Awgn => AWGN_PRESETS.contains(&self.sigma),
            DistortionKind::Blur => BLUR_PRESETS.contains(&self.sigma),
            DistortionKind::Identity => true,
        }
    }

    /// Short tag such as `awgn-15`, used in file names.
    pub fn tag(&self) -> String {
        match self.kind {
            DistortionKind::Identity => "identity".into(),
            k => format!("{k}-{}", self.sigma),
        }
    }
}

fn clamp_pixel(v: f64) -> f32 {
    v.clamp(0.0, 255.0) as f32
}

/// Adds i.i.d. N(0, sigma²) noise to every value and clamps to [0, 255].
pub fn awgn(image: &[f32], sigma: f64, rng: &mut Rng) -> Result<Vec<f32>> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Config(format!(
            "noise sigma must be finite and >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(image.to_vec());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    Ok(image
        .iter()
        .map(|&v| clamp_pixel(v as f64 + normal.sample(rng)))
        .collect())
}

/// Kernel length `round(4σ)`, bumped to the next odd number, at least 1.
pub fn blur_kernel_size(sigma: f64) -> usize {
    let size = (4.0 * sigma).round().max(1.0) as usize;
    if size.is_multiple_of(2) {
        size + 1
    } else {
        size
    }
}

/// Sampled, unit-sum 1D Gaussian.
pub fn make_blur_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Config(format!(
            "blur sigma must be finite and >= 0, got {sigma}"
        )));
    }
    let size = blur_kernel_size(sigma);
    if size == 1 {
        return Ok(vec![1.0]);
    }
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Separable blur of a `[C, H, W]` image: rows first, then columns, with
/// reflect padding; the result is clamped to [0, 255].
pub fn gaussian_blur(image: &[f32], shape: [usize; 3], sigma: f64) -> Result<Vec<f32>> {
    let [c, h, w] = shape;
    if image.len() != c * h * w {
        return Err(Error::Input(format!(
            "image has {} values, shape {shape:?} needs {}",
            image.len(),
            c * h * w
        )));
    }
    let kernel = make_blur_kernel(sigma)?;
    if kernel.len() == 1 {
        return Ok(image.to_vec());
    }
    let r = (kernel.len() / 2) as isize;
    let mut horiz = vec![0.0f64; h * w];
    let mut out = Vec::with_capacity(image.len());
    for plane in image.chunks_exact(h * w) {
        for y in 0..h {
            for x in 0..w {
                horiz[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * plane[y * w + reflect(x as isize + k as isize - r, w)] as f64)
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * horiz[reflect(y as isize + k as isize - r, h) * w + x])
                    .sum();
                out.push(clamp_pixel(v));
            }
        }
    }
    Ok(out)
}

/// Applies `spec` to one image whose stable identifier is `id`.
pub fn distort_image(image: &[f32], shape: [usize; 3], spec: &DistortionSpec, id: u64) -> Result<Vec<f32>> {
    spec.validate()?;
    match spec.kind {
        DistortionKind::Identity => Ok(image.to_vec()),
        DistortionKind::Awgn => {
            let mut rng = rng_from(spec.seed, &[stream::DISTORT, id]);
            awgn(image, spec.sigma, &mut rng)
        }
        DistortionKind::Blur => gaussian_blur(image, shape, spec.sigma),
    }
}

/// Distorts every image; labels, ids and split are carried over and the
/// spec is recorded in the provenance.
pub fn distort_dataset(dataset: &Dataset, spec: &DistortionSpec) -> Result<Dataset> {
    spec.validate()?;
    if let Some(prev) = &dataset.provenance.distortion {
        if prev.kind != DistortionKind::Identity {
            return Err(Error::Usage(format!(
                "dataset is already distorted ({}); distortions do not stack",
                prev.tag()
            )));
        }
    }
    let shape = dataset.image_shape;
    let images: Vec<Vec<f32>> = (0..dataset.len())
        .into_par_iter()
        .map(|i| distort_image(dataset.image(i), shape, spec, dataset.ids[i]))
        .collect::<Result<_>>()?;
    let mut out = dataset.clone();
    out.pixels = images.concat();
    out.provenance.distortion = Some(*spec);
    Ok(out)
}
