//! Selective fine-tuning (per-filter gradient masks), accuracy-vs-size
//! curves and binarized invariance heatmaps.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TensorSet;
use crate::error::{Error, Result};
use crate::nn::{AdamHyper, CapturePoint, Layer, Network, Trainability};
use crate::rng::{derive_seed, rng_from, stream};
use crate::scalar::Scalar;
use crate::susceptibility::{
    extract_activations, finish_csv, select_filters, FilterRanking, FilterSelection, SelectionMode,
};
use crate::tensor::Tensor;
use crate::zoo::{evaluate, train, TrainConfig, TrainHistory};

pub const FINETUNE_LEARNING_RATE: f64 = 1e-4;

/// Training settings for fine-tuning: the baseline defaults with a lower
/// learning rate.
pub fn default_finetune_train() -> TrainConfig {
    TrainConfig {
        adam: AdamHyper::with_learning_rate(FINETUNE_LEARNING_RATE),
        ..TrainConfig::default()
    }
}

/// Per-parameter trainability and the batch norms whose running statistics
/// may update.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    /// One entry per parameter, in [`Network::named_params`] order.
    pub params: Vec<(String, Trainability)>,
    /// Layer indices of batch norms with live statistics.
    pub live_bn: Vec<usize>,
}

impl MaskPlan {
    pub fn get(&self, name: &str) -> Option<&Trainability> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Layers treated as the classifier: every dense layer, or for fully
/// convolutional stacks the last convolution and its batch norm.
fn classifier_layers<T: Scalar>(net: &Network<T>) -> Vec<usize> {
    let dense: Vec<usize> = net
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Dense { .. }))
        .map(|(i, _)| i)
        .collect();
    if !dense.is_empty() {
        return dense;
    }
    net.conv_layers()
        .last()
        .map(|c| std::iter::once(c.index).chain(c.batchnorm).collect())
        .unwrap_or_default()
}

/// Selected channels of each targeted conv layer (kernel slice, bias entry
/// and the following batch norm's γ/β) are trainable; everything else is
/// frozen except the classifier when `freeze_classifier` is false.
pub fn build_masks<T: Scalar>(
    net: &Network<T>,
    selections: &[FilterSelection],
    freeze_classifier: bool,
) -> Result<MaskPlan> {
    let mut per_layer: Vec<Option<Trainability>> = vec![None; net.layers().len()];
    let mut live_bn = Vec::new();
    for sel in selections {
        let info = net
            .conv_layer(sel.layer_id)
            .map_err(|_| Error::Config(format!("selection targets missing conv layer {}", sel.layer_id)))?;
        if sel.filters != info.filters || sel.selected.iter().any(|&s| s >= info.filters) {
            return Err(Error::Config(format!(
                "selection for layer {} assumes {} filters, layer has {}",
                sel.layer_id, sel.filters, info.filters
            )));
        }
        if per_layer[info.index].is_some() {
            return Err(Error::Config(format!("layer {} selected twice", sel.layer_id)));
        }
        let t = Trainability::Channels(sel.flags());
        per_layer[info.index] = Some(t.clone());
        if let Some(bn) = info.batchnorm {
            per_layer[bn] = Some(t);
            live_bn.push(bn);
        }
    }
    if !freeze_classifier {
        for i in classifier_layers(net) {
            per_layer[i] = Some(Trainability::All);
            if matches!(net.layers()[i], Layer::BatchNorm(_)) && !live_bn.contains(&i) {
                live_bn.push(i);
            }
        }
    }
    live_bn.sort_unstable();
    let mut params = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        for (name, _) in layer.params() {
            let t = per_layer[i].clone().unwrap_or(Trainability::Frozen);
            params.push((format!("layers.{i}.{name}"), t));
        }
    }
    Ok(MaskPlan { params, live_bn })
}

/// Installs `plan` on `net`.
pub fn apply_masks<T: Scalar>(net: &mut Network<T>, plan: &MaskPlan) -> Result<()> {
    let mut it = plan.params.iter();
    for (i, layer) in net.layers_mut().iter_mut().enumerate() {
        for (name, p) in layer.params_mut() {
            let (pname, t) = it
                .next()
                .ok_or_else(|| Error::Config("mask plan is shorter than the network".into()))?;
            if *pname != format!("layers.{i}.{name}") {
                return Err(Error::Config(format!(
                    "mask plan entry {pname} does not match layers.{i}.{name}"
                )));
            }
            p.set_trainability(t.clone())?;
        }
        if let Layer::BatchNorm(bn) = layer {
            bn.stats_frozen = !plan.live_bn.contains(&i);
        }
    }
    if it.next().is_some() {
        return Err(Error::Config("mask plan is longer than the network".into()));
    }
    Ok(())
}

/// Trainable scalar count under `plan`.
pub fn masked_param_count<T: Scalar>(net: &Network<T>, plan: &MaskPlan) -> Result<usize> {
    let mut copy = net.clone();
    apply_masks(&mut copy, plan)?;
    Ok(copy.trainable_param_count())
}

/// Fine-tunes a copy of `net` under `plan`. Masked-out entries and frozen
/// batch-norm statistics are left bitwise unchanged.
pub fn finetune<T: Scalar>(
    net: &Network<T>,
    plan: &MaskPlan,
    train_set: &TensorSet<T>,
    val_set: &TensorSet<T>,
    cfg: &TrainConfig,
) -> Result<(Network<T>, TrainHistory)> {
    let mut tuned = net.clone();
    tuned.reset_optimizer_state();
    apply_masks(&mut tuned, plan)?;
    let history = train(&mut tuned, train_set, val_set, cfg)?;
    Ok((tuned, history))
}

/// One curve cell: fine-tunes on the `(n, seed)` subsample of `pool` with
/// a training seed derived from `(n, seed)`.
pub fn finetune_cell<T: Scalar>(
    base: &Network<T>,
    plan: &MaskPlan,
    pool: &TensorSet<T>,
    n: usize,
    seed: u64,
    train_cfg: &TrainConfig,
) -> Result<(Network<T>, TrainHistory)> {
    let (tr, va) = subsample_split(pool.len(), n, seed)?;
    let cfg = TrainConfig {
        seed: derive_seed(seed, &[stream::FINETUNE, n as u64]),
        ..*train_cfg
    };
    finetune(base, plan, &pool.select(&tr), &pool.select(&va), &cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveConfig {
    pub modes: Vec<SelectionMode>,
    pub fraction: f64,
    pub train_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub freeze_classifier: bool,
    pub train: TrainConfig,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            modes: vec![SelectionMode::Most, SelectionMode::Least, SelectionMode::All],
            fraction: 0.25,
            train_sizes: vec![100, 500, 1000],
            seeds: vec![1, 2, 3],
            freeze_classifier: true,
            train: default_finetune_train(),
        }
    }
}

impl CurveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.seeds.is_empty() || self.train_sizes.is_empty() {
            return Err(Error::Config(
                "curve needs at least one mode, seed and train size".into(),
            ));
        }
        if self.train_sizes[0] == 0 || self.train_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "train sizes must be positive and strictly increasing".into(),
            ));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!(
                "fraction must be in (0, 1], got {}",
                self.fraction
            )));
        }
        self.train.validate()
    }
}

/// Validation images drawn alongside `n` training images.
pub fn validation_size(n: usize) -> usize {
    n.div_ceil(4)
}

/// Seeded draw of `n` training and [`validation_size`]`(n)` validation
/// indices from a pool of `pool` images. Depends only on `(n, seed)`.
pub fn subsample_split(pool: usize, n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let v = validation_size(n);
    if n == 0 || n + v > pool {
        return Err(Error::Input(format!(
            "train size {n} needs {} distorted images ({n} + {v} validation), pool has {pool}",
            n + v
        )));
    }
    let drawn = sample(&mut rng_from(seed, &[stream::SUBSAMPLE, n as u64]), pool, n + v).into_vec();
    let mut tr = drawn[..n].to_vec();
    let mut va = drawn[n..].to_vec();
    tr.sort_unstable();
    va.sort_unstable();
    Ok((tr, va))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub mode: SelectionMode,
    pub train_size: usize,
    pub seed: u64,
    pub noisy_test_acc: f64,
    pub clean_test_acc: f64,
    pub trainable_params: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyCurve {
    pub rows: Vec<CurveRow>,
}

impl AccuracyCurve {
    /// Long format: `mode,train_size,seed,noisy_test_acc,clean_test_acc,trainable_params,epochs_run`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        finish_csv(w)
    }

    /// Median noisy-test accuracy over seeds for each (mode, train size).
    pub fn medians(&self) -> Vec<(SelectionMode, usize, f64)> {
        let mut keys: Vec<(SelectionMode, usize)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(r.mode, r.train_size)) {
                keys.push((r.mode, r.train_size));
            }
        }
        keys.into_iter()
            .map(|(m, n)| {
                let mut v: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.mode == m && r.train_size == n)
                    .map(|r| r.noisy_test_acc)
                    .collect();
                v.sort_by(f64::total_cmp);
                let k = v.len();
                let med = if k % 2 == 1 {
                    v[k / 2]
                } else {
                    (v[k / 2 - 1] + v[k / 2]) / 2.0
                };
                (m, n, med)
            })
            .collect()
    }

    pub fn median(&self, mode: SelectionMode, train_size: usize) -> Option<f64> {
        self.medians()
            .into_iter()
            .find(|&(m, n, _)| m == mode && n == train_size)
            .map(|t| t.2)
    }
}

/// Held-out sets the curve is scored on.
pub struct CurveData<'a, T> {
    /// Distorted training pool subsamples are drawn from.
    pub noisy_pool: &'a TensorSet<T>,
    pub noisy_test: &'a TensorSet<T>,
    pub clean_test: &'a TensorSet<T>,
}

/// Fine-tunes a fresh copy of `base` for every (mode, train size, seed)
/// cell. Cells with the same size and seed share the data subsample and
/// the training seed, so only the mask differs between modes.
pub fn accuracy_curve<T: Scalar>(
    base: &Network<T>,
    rankings: &[FilterRanking],
    data: &CurveData<'_, T>,
    cfg: &CurveConfig,
) -> Result<AccuracyCurve> {
    cfg.validate()?;
    if rankings.is_empty() {
        return Err(Error::Config("curve needs at least one ranked layer".into()));
    }
    let pool = data.noisy_pool.len();
    for &n in &cfg.train_sizes {
        subsample_split(pool, n, 0)?;
    }
    let mut plans = Vec::new();
    for &mode in &cfg.modes {
        let selections = rankings
            .iter()
            .map(|r| select_filters(r, mode, cfg.fraction))
            .collect::<Result<Vec<_>>>()?;
        let plan = build_masks(base, &selections, cfg.freeze_classifier)?;
        let count = masked_param_count(base, &plan)?;
        plans.push((mode, plan, count));
    }
    let mut jobs = Vec::new();
    for (p, _) in cfg.modes.iter().enumerate() {
        for &n in &cfg.train_sizes {
            for &seed in &cfg.seeds {
                jobs.push((p, n, seed));
            }
        }
    }
    let rows = jobs
        .par_iter()
        .map(|&(p, n, seed)| {
            let (mode, plan, count) = &plans[p];
            let (tuned, history) = finetune_cell(base, plan, data.noisy_pool, n, seed, &cfg.train)?;
            Ok(CurveRow {
                mode: *mode,
                train_size: n,
                seed,
                noisy_test_acc: evaluate(&tuned, data.noisy_test)?.accuracy,
                clean_test_acc: evaluate(&tuned, data.clean_test)?.accuracy,
                trainable_params: *count,
                epochs_run: history.epochs_run(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AccuracyCurve { rows })
}

/// Per-location Hamming distance between binarized channel vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisparityHeatmap {
    pub layer_id: usize,
    pub filters: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width`.
    pub cells: Vec<u32>,
    pub total: u64,
}

impl DisparityHeatmap {
    pub fn cell(&self, y: usize, x: usize) -> u32 {
        self.cells[y * self.width + x]
    }

    /// The grid as headerless CSV, one line per row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for row in self.cells.chunks(self.width) {
            w.write_record(row.iter().map(u32::to_string))?;
        }
        finish_csv(w)
    }
}

/// Compares the post-ReLU responses of one clean and one distorted image at
/// a conv layer: a channel is on iff its response is positive.
pub fn invariance_heatmap<T: Scalar>(
    net: &Network<T>,
    clean: &Tensor<T>,
    distorted: &Tensor<T>,
    layer_id: usize,
) -> Result<DisparityHeatmap> {
    if clean.batch() != 1 || clean.shape() != distorted.shape() {
        return Err(Error::Usage(
            "heatmaps compare exactly one clean and one distorted image".into(),
        ));
    }
    let info = net.conv_layer(layer_id)?;
    let a = extract_activations(net, clean, layer_id, CapturePoint::PostRelu)?;
    let b = extract_activations(net, distorted, layer_id, CapturePoint::PostRelu)?;
    let (f, h, w) = (info.filters, info.out_height, info.out_width);
    let plane = h * w;
    let zero = T::zero();
    let mut cells = vec![0u32; plane];
    for c in 0..f {
        let (pa, pb) = (
            &a.data()[c * plane..(c + 1) * plane],
            &b.data()[c * plane..(c + 1) * plane],
        );
        for (cell, (&x, &y)) in cells.iter_mut().zip(pa.iter().zip(pb)) {
            if (x > zero) != (y > zero) {
                *cell += 1;
            }
        }
    }
    let total = cells.iter().map(|&c| c as u64).sum();
    Ok(DisparityHeatmap {
        layer_id,
        filters: f,
        height: h,
        width: w,
        cells,
        total,
    })
}
