//! Experiment configuration, read from and written to TOML. Unknown keys
//! are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SplitSpec;
use crate::distortion::DistortionSpec;
use crate::error::{Error, Result};
use crate::exemplar::{check_combination, FeatureKind, FeatureRep, MetricKind, MEDOID_SUBSAMPLE};
use crate::finetune::CurveConfig;
use crate::nn::CapturePoint;
use crate::susceptibility::EmdMetric;
use crate::zoo::{Preset, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    #[default]
    Cifar10,
    Cifar100,
    /// Procedural gratings; needs no files.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory holding the CIFAR binary batches.
    pub path: Option<PathBuf>,
    pub strict_counts: bool,
    /// Seeded cap on the training pool before splitting.
    pub train_limit: Option<usize>,
    /// Seeded cap on the test set.
    pub test_limit: Option<usize>,
    pub synthetic_per_class: usize,
    pub synthetic_test_per_class: usize,
    pub synthetic_noise: f64,
    pub split: SplitSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Cifar10,
            path: None,
            strict_counts: true,
            train_limit: None,
            test_limit: None,
            synthetic_per_class: 50,
            synthetic_test_per_class: 20,
            synthetic_noise: 12.0,
            split: SplitSpec::default(),
        }
    }
}

impl DatasetConfig {
    pub fn class_count(&self) -> usize {
        match self.kind {
            DatasetKind::Cifar100 => 100,
            _ => 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub architecture: Preset,
    /// Load this baseline instead of training one.
    pub checkpoint: Option<PathBuf>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Preset::Cifar10Small,
            checkpoint: None,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankMethod {
    #[default]
    Assoc,
    Nonassoc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonAssocSettings {
    pub features: FeatureKind,
    pub binarize: bool,
    pub metric: MetricKind,
    pub max_points: usize,
}

impl Default for NonAssocSettings {
    fn default() -> Self {
        Self {
            features: FeatureKind::Pixels,
            binarize: false,
            metric: MetricKind::Euclidean,
            max_points: MEDOID_SUBSAMPLE,
        }
    }
}

impl NonAssocSettings {
    /// Feature representation for ranking conv layer `layer_id`.
    pub fn rep(&self, layer_id: usize) -> FeatureRep {
        FeatureRep {
            kind: self.features,
            layer_id: (self.features == FeatureKind::CollapsedActivations).then_some(layer_id),
            binarize: self.binarize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankingConfig {
    pub method: RankMethod,
    /// 1-based conv layer ids to rank and fine-tune.
    pub layers: Vec<usize>,
    /// Number of clean/distorted training pairs analysed.
    pub pairs: usize,
    pub emd: EmdMetric,
    pub capture: CapturePoint,
    pub nonassoc: NonAssocSettings,
    /// Also compute the other method's ranking and report top-k overlap.
    pub compare: bool,
    pub seed: u64,
}

impl Default for RankingConfig {
    fn default() -> Self {
        Self {
            method: RankMethod::Assoc,
            layers: vec![1, 2],
            pairs: 2000,
            emd: EmdMetric::Marginal,
            capture: CapturePoint::PostRelu,
            nonassoc: NonAssocSettings::default(),
            compare: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InvarianceConfig {
    pub enabled: bool,
    /// Test images compared.
    pub images: usize,
    /// Train size of the fine-tuned model; defaults to the largest curve size.
    pub train_size: Option<usize>,
}

impl Default for InvarianceConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            images: 20,
            train_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub precision: Precision,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub baseline: TrainConfig,
    pub distortion: DistortionSpec,
    pub ranking: RankingConfig,
    pub finetune: CurveConfig,
    pub invariance: InvarianceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F32,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            baseline: TrainConfig::default(),
            distortion: DistortionSpec::awgn(15.0, 0),
            ranking: RankingConfig::default(),
            finetune: CurveConfig::default(),
            invariance: InvarianceConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Replaces every single-valued seed; the fine-tuning replicate seeds
    /// are left alone.
    pub fn override_seed(&mut self, seed: u64) {
        self.dataset.split.seed = seed;
        self.model.init_seed = seed;
        self.baseline.seed = seed;
        self.distortion.seed = seed;
        self.ranking.seed = seed;
    }

    /// A tiny synthetic configuration that runs end to end in seconds.
    pub fn smoke() -> Self {
        let mut cfg = Self::default();
        cfg.dataset.kind = DatasetKind::Synthetic;
        cfg.dataset.synthetic_per_class = 50;
        cfg.dataset.synthetic_test_per_class = 10;
        cfg.baseline.max_epochs = 3;
        cfg.baseline.batch_size = 32;
        cfg.baseline.patience = 3;
        cfg.ranking.pairs = 40;
        cfg.ranking.compare = true;
        cfg.finetune.train_sizes = vec![20, 40];
        cfg.finetune.seeds = vec![1, 2];
        cfg.finetune.train.max_epochs = 2;
        cfg.finetune.train.batch_size = 16;
        cfg.invariance.images = 4;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.dataset.kind, DatasetKind::Cifar10 | DatasetKind::Cifar100) && self.dataset.path.is_none() {
            return Err(Error::Config("dataset.path is required for CIFAR datasets".into()));
        }
        if self.dataset.kind == DatasetKind::Synthetic
            && (self.dataset.synthetic_per_class == 0 || self.dataset.synthetic_test_per_class == 0)
        {
            return Err(Error::Config(
                "synthetic datasets need at least one image per class".into(),
            ));
        }
        if !(self.dataset.split.ratio > 0.0 && self.dataset.split.ratio < 1.0) {
            return Err(Error::Config(
                "dataset.split.ratio must lie strictly between 0 and 1".into(),
            ));
        }
        self.baseline.validate()?;
        self.distortion.validate()?;
        self.finetune.validate()?;
        let r = &self.ranking;
        if r.layers.is_empty() || r.pairs == 0 {
            return Err(Error::Config("ranking needs at least one layer and one pair".into()));
        }
        let mut layers = r.layers.clone();
        layers.sort_unstable();
        layers.dedup();
        if layers.len() != r.layers.len() || layers[0] == 0 {
            return Err(Error::Config(
                "ranking.layers must be distinct 1-based conv layer ids".into(),
            ));
        }
        if r.method == RankMethod::Nonassoc || r.compare {
            check_combination(&r.nonassoc.rep(r.layers[0]), r.nonassoc.metric)?;
            if r.nonassoc.max_points == 0 {
                return Err(Error::Config("ranking.nonassoc.max_points must be at least 1".into()));
            }
        }
        if self.invariance.enabled && self.invariance.images == 0 {
            return Err(Error::Config(
                "invariance.images must be at least 1 when enabled".into(),
            ));
        }
        Ok(())
    }
}
