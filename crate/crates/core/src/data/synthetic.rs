//! Procedural stand-in for CIFAR: each class is an oriented, colored grating
//! with random phase, contrast and pixel noise. Pixels are whole numbers so
//! the images survive a CIFAR binary round trip unchanged.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Provenance, SplitTag};
use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_shape: [usize; 3],
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub seed: u64,
    /// First image id; ids run consecutively from here.
    pub id_offset: u64,
}

impl SyntheticSpec {
    pub fn cifar_like(classes: usize, per_class: usize, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            image_shape: [3, 32, 32],
            noise: 12.0,
            seed,
            id_offset: 0,
        }
    }
}

/// Images are interleaved by class (`label = i % classes`).
pub fn synthetic_dataset(spec: &SyntheticSpec, split: SplitTag) -> Result<Dataset> {
    if spec.classes == 0 || spec.per_class == 0 {
        return Err(Error::Config(
            "synthetic dataset needs at least one class and image".into(),
        ));
    }
    let [c, h, w] = spec.image_shape;
    let n = spec.classes * spec.per_class;
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut pixels = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes;
        let id = spec.id_offset + i as u64;
        let mut rng = rng_from(spec.seed, &[id]);
        let theta = PI * class as f64 / spec.classes as f64;
        let freq = 2.0 + (class % 3) as f64;
        let phase = rng.random_range(0.0..2.0 * PI);
        let contrast = rng.random_range(50.0..90.0);
        for ch in 0..c {
            let tint = 0.35 + 0.65 * (((class + ch * 3) % 5) as f64 / 4.0);
            for y in 0..h {
                for x in 0..w {
                    let u = (x as f64 * theta.cos() + y as f64 * theta.sin()) / w.max(h) as f64;
                    let v = 128.0 + contrast * tint * (2.0 * PI * freq * u + phase).sin() + noise.sample(&mut rng);
                    pixels.push(v.round().clamp(0.0, 255.0) as f32);
                }
            }
        }
        labels.push(class);
        ids.push(id);
    }
    Dataset::new(
        spec.image_shape,
        pixels,
        labels,
        ids,
        spec.classes,
        split,
        Provenance {
            source: format!("synthetic:seed={}", spec.seed),
            distortion: None,
        },
    )
}
