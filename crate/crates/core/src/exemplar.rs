//! Non-associative ranking: one medoid exemplar per dataset (k = 1), then
//! per-filter distances between the clean and noisy exemplars' activations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{CapturePoint, Network};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::susceptibility::{
    extract_activations, filter_distances, rank_by_distance, sample_indices, EmdMetric, FilterRanking,
};
use crate::tensor::Tensor;

/// Above this many points the medoid is computed on a seeded subsample.
pub const MEDOID_SUBSAMPLE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Pixels,
    CollapsedActivations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRep {
    pub kind: FeatureKind,
    #[serde(default)]
    pub layer_id: Option<usize>,
    #[serde(default)]
    pub binarize: bool,
}

impl FeatureRep {
    pub fn pixels() -> Self {
        Self {
            kind: FeatureKind::Pixels,
            layer_id: None,
            binarize: false,
        }
    }

    pub fn activations(layer_id: usize, binarize: bool) -> Self {
        Self {
            kind: FeatureKind::CollapsedActivations,
            layer_id: Some(layer_id),
            binarize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.layer_id, self.binarize) {
            (FeatureKind::Pixels, _, true) => {
                Err(Error::Config("binarize applies only to collapsed activations".into()))
            }
            (FeatureKind::CollapsedActivations, None, _) => {
                Err(Error::Config("collapsed activations need a layer id".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    #[default]
    Euclidean,
    Hamming,
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(MetricKind::Euclidean),
            "hamming" => Ok(MetricKind::Hamming),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

/// Rejects metric/representation pairs that are not defined.
pub fn check_combination(rep: &FeatureRep, metric: MetricKind) -> Result<()> {
    rep.validate()?;
    if metric == MetricKind::Hamming && !rep.binarize {
        return Err(Error::Config(
            "hamming distance needs binarized collapsed activations".into(),
        ));
    }
    Ok(())
}

/// One feature vector per image.
#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    Real {
        dim: usize,
        values: Vec<f64>,
    },
    /// Bits packed little-endian into `words` u64s per row.
    Binary {
        dim: usize,
        words: usize,
        bits: Vec<u64>,
    },
}

impl Features {
    pub fn real(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || !values.len().is_multiple_of(dim) || values.is_empty() {
            return Err(Error::Input(format!(
                "{} values do not form rows of {dim}",
                values.len()
            )));
        }
        Ok(Features::Real { dim, values })
    }

    /// Element is 1 iff the value is strictly positive.
    pub fn binarized(dim: usize, values: &[f64]) -> Result<Self> {
        if dim == 0 || !values.len().is_multiple_of(dim) || values.is_empty() {
            return Err(Error::Input(format!(
                "{} values do not form rows of {dim}",
                values.len()
            )));
        }
        let words = dim.div_ceil(64);
        let n = values.len() / dim;
        let mut bits = vec![0u64; n * words];
        for (r, row) in values.chunks(dim).enumerate() {
            for (k, &v) in row.iter().enumerate() {
                if v > 0.0 {
                    bits[r * words + k / 64] |= 1 << (k % 64);
                }
            }
        }
        Ok(Features::Binary { dim, words, bits })
    }

    pub fn len(&self) -> usize {
        match self {
            Features::Real { dim, values } => values.len() / dim,
            Features::Binary { words, bits, .. } => bits.len() / words,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        match self {
            Features::Real { dim, .. } | Features::Binary { dim, .. } => *dim,
        }
    }

    /// Row `i` as reals (bits become 0/1).
    pub fn row(&self, i: usize) -> Vec<f64> {
        match self {
            Features::Real { dim, values } => values[i * dim..(i + 1) * dim].to_vec(),
            Features::Binary { dim, words, bits } => (0..*dim)
                .map(|k| ((bits[i * words + k / 64] >> (k % 64)) & 1) as f64)
                .collect(),
        }
    }

    fn subset(&self, idx: &[usize]) -> Features {
        match self {
            Features::Real { dim, values } => Features::Real {
                dim: *dim,
                values: idx
                    .iter()
                    .flat_map(|&i| values[i * dim..(i + 1) * dim].iter().copied())
                    .collect(),
            },
            Features::Binary { dim, words, bits } => Features::Binary {
                dim: *dim,
                words: *words,
                bits: idx
                    .iter()
                    .flat_map(|&i| bits[i * words..(i + 1) * words].iter().copied())
                    .collect(),
            },
        }
    }
}

const CHUNK: usize = 64;

/// Feature vectors for a batch of preprocessed images. Pixel features are
/// the flattened network inputs; activation features are the flattened
/// `[F, H, W]` maps at the layer's capture point.
pub fn featurize<T: Scalar>(
    images: &Tensor<T>,
    rep: &FeatureRep,
    network: Option<&Network<T>>,
    capture: CapturePoint,
) -> Result<Features> {
    rep.validate()?;
    let n = images.batch();
    if n == 0 {
        return Err(Error::Input("cannot featurize an empty image set".into()));
    }
    match (rep.kind, network) {
        (FeatureKind::Pixels, None) => Features::real(images.len() / n, images.to_f64_vec()),
        (FeatureKind::CollapsedActivations, Some(net)) => {
            let layer = rep.layer_id.expect("validated");
            let mut values = Vec::new();
            for start in (0..n).step_by(CHUNK) {
                let end = (start + CHUNK).min(n);
                values.extend(extract_activations(net, &images.slice_batch(start, end), layer, capture)?.to_f64_vec());
            }
            let dim = values.len() / n;
            if rep.binarize {
                Features::binarized(dim, &values)
            } else {
                Features::real(dim, values)
            }
        }
        (FeatureKind::Pixels, Some(_)) => Err(Error::Usage("pixel features do not take a network".into())),
        (FeatureKind::CollapsedActivations, None) => {
            Err(Error::Usage("collapsed-activation features need a network".into()))
        }
    }
}

fn distance_fn(features: &Features, metric: MetricKind) -> Result<Box<dyn Fn(usize, usize) -> f64 + Sync + '_>> {
    match (features, metric) {
        (Features::Real { dim, values }, MetricKind::Euclidean) => Ok(Box::new(move |i, j| {
            let (a, b) = (&values[i * dim..(i + 1) * dim], &values[j * dim..(j + 1) * dim]);
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        })),
        (Features::Binary { words, bits, .. }, MetricKind::Hamming) => Ok(Box::new(move |i, j| {
            let (a, b) = (&bits[i * words..(i + 1) * words], &bits[j * words..(j + 1) * words]);
            a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones() as u64).sum::<u64>() as f64
        })),
        (Features::Binary { .. }, MetricKind::Euclidean) => {
            // 0/1 vectors: Euclidean distance is the square root of Hamming.
            let hamming = distance_fn(features, MetricKind::Hamming)?;
            Ok(Box::new(move |i, j| hamming(i, j).sqrt()))
        }
        (Features::Real { .. }, MetricKind::Hamming) => {
            Err(Error::Config("hamming distance needs binarized features".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Medoid {
    pub index: usize,
    /// Sum of distances from the medoid to every point considered.
    pub total_distance: f64,
}

/// Exact k = 1 medoid: argmin over i of Σ_j d(x_i, x_j), ties to the lowest
/// index. Row sums are accumulated in index order so the result does not
/// depend on scheduling.
pub fn medoid(features: &Features, metric: MetricKind) -> Result<Medoid> {
    let n = features.len();
    if n == 0 {
        return Err(Error::Input("medoid of an empty set".into()));
    }
    let d = distance_fn(features, metric)?;
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i + 1..n).map(|j| d(i, j)).collect())
        .collect();
    let mut best = Medoid {
        index: 0,
        total_distance: f64::INFINITY,
    };
    for i in 0..n {
        let total: f64 = (0..n)
            .map(|j| match j.cmp(&i) {
                std::cmp::Ordering::Less => upper[j][i - j - 1],
                std::cmp::Ordering::Equal => 0.0,
                std::cmp::Ordering::Greater => upper[i][j - i - 1],
            })
            .sum();
        if total < best.total_distance {
            best = Medoid {
                index: i,
                total_distance: total,
            };
        }
    }
    Ok(best)
}

/// [`medoid`] over a seeded subsample of at most `max_points` points; the
/// returned index refers to the full set.
pub fn medoid_subsampled(features: &Features, metric: MetricKind, max_points: usize, seed: u64) -> Result<Medoid> {
    let n = features.len();
    if n <= max_points {
        return medoid(features, metric);
    }
    let idx = sample_indices(n, max_points, seed, stream::SUBSAMPLE)?;
    let m = medoid(&features.subset(&idx), metric)?;
    Ok(Medoid {
        index: idx[m.index],
        total_distance: m.total_distance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetTag {
    Clean,
    Noisy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub tag: DatasetTag,
    pub index: usize,
    pub total_distance: f64,
    #[serde(skip)]
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonAssocConfig {
    pub layer_id: usize,
    pub rep: FeatureRep,
    pub metric: MetricKind,
    #[serde(default)]
    pub emd_metric: EmdMetric,
    #[serde(default)]
    pub capture: CapturePoint,
    #[serde(default = "default_subsample")]
    pub max_points: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_subsample() -> usize {
    MEDOID_SUBSAMPLE
}

impl NonAssocConfig {
    pub fn new(layer_id: usize, rep: FeatureRep, metric: MetricKind) -> Self {
        Self {
            layer_id,
            rep,
            metric,
            emd_metric: EmdMetric::default(),
            capture: CapturePoint::default(),
            max_points: MEDOID_SUBSAMPLE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonAssocResult {
    pub ranking: FilterRanking,
    pub clean: Exemplar,
    pub noisy: Exemplar,
    /// Per-filter distance between the two exemplars.
    pub distances: Vec<f64>,
}

impl NonAssocResult {
    /// JSON report of the chosen exemplars.
    pub fn report(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::json!({
            "layer_id": self.ranking.layer_id,
            "clean": self.clean,
            "noisy": self.noisy,
            "distances": self.distances,
        }))?)
    }
}

fn find_exemplar<T: Scalar>(
    net: &Network<T>,
    images: &Tensor<T>,
    cfg: &NonAssocConfig,
    tag: DatasetTag,
) -> Result<Exemplar> {
    let network = (cfg.rep.kind == FeatureKind::CollapsedActivations).then_some(net);
    let features = featurize(images, &cfg.rep, network, cfg.capture)?;
    let m = medoid_subsampled(&features, cfg.metric, cfg.max_points, cfg.seed)?;
    Ok(Exemplar {
        tag,
        index: m.index,
        total_distance: m.total_distance,
        features: features.row(m.index),
    })
}

/// Ranks filters of `cfg.layer_id` by the distance between the activations
/// of the clean and noisy exemplars. The two sets need not be paired.
pub fn nonassoc_rank<T: Scalar>(
    net: &Network<T>,
    clean: &Tensor<T>,
    noisy: &Tensor<T>,
    cfg: &NonAssocConfig,
) -> Result<NonAssocResult> {
    check_combination(&cfg.rep, cfg.metric)?;
    let info = net.conv_layer(cfg.layer_id)?;
    let ce = find_exemplar(net, clean, cfg, DatasetTag::Clean)?;
    let ne = find_exemplar(net, noisy, cfg, DatasetTag::Noisy)?;
    let a = extract_activations(net, &clean.select_batch(&[ce.index]), cfg.layer_id, cfg.capture)?.to_f64_vec();
    let b = extract_activations(net, &noisy.select_batch(&[ne.index]), cfg.layer_id, cfg.capture)?.to_f64_vec();
    let distances = filter_distances(&a, &b, info.filters, info.out_height, info.out_width, cfg.emd_metric)?;
    let ranking = rank_by_distance(cfg.layer_id, &distances)?;
    Ok(NonAssocResult {
        ranking,
        clean: ce,
        noisy: ne,
        distances,
    })
}

/// Size of the intersection of the two top-k sets.
pub fn ranking_overlap(a: &FilterRanking, b: &FilterRanking, k: usize) -> Result<usize> {
    if a.layer_id != b.layer_id || a.filters() != b.filters() {
        return Err(Error::Usage(format!(
            "rankings cover different layers ({} with {} filters vs {} with {})",
            a.layer_id,
            a.filters(),
            b.layer_id,
            b.filters()
        )));
    }
    if k > a.filters() {
        return Err(Error::Usage(format!("k = {k} exceeds the {} filters", a.filters())));
    }
    let mut in_a = vec![false; a.filters()];
    for &f in a.top(k) {
        in_a[f] = true;
    }
    Ok(b.top(k).iter().filter(|&&f| in_a[f]).count())
}
