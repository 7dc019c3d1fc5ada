//! Baseline architectures, training with validation-based early stopping,
//! and evaluation.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TensorSet;
use crate::error::{Error, Result};
use crate::nn::{adam_step, softmax_xent, AdamHyper, ArchitectureSpec, LayerSpec, Network};
use crate::rng::{rng_from, stream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Cifar10Small,
    AllconvBn,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Cifar10Small => "cifar10-small",
            Preset::AllconvBn => "allconv-bn",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10-small" => Ok(Preset::Cifar10Small),
            "allconv-bn" => Ok(Preset::AllconvBn),
            other => Err(Error::Config(format!(
                "unknown architecture `{other}` (expected cifar10-small or allconv-bn)"
            ))),
        }
    }
}

fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        out_channels,
        kernel,
        stride,
        padding,
    }
}

const POOL2: LayerSpec = LayerSpec::Maxpool {
    kernel: 2,
    stride: 2,
    padding: 0,
};

/// Layer stack of a preset for 3×32×32 inputs.
pub fn architecture(preset: Preset, num_classes: usize) -> Result<ArchitectureSpec> {
    if num_classes != 10 && num_classes != 100 {
        return Err(Error::Config(format!(
            "presets are defined for 10 or 100 classes, got {num_classes}"
        )));
    }
    use LayerSpec::{Batchnorm, Relu};
    let layers = match preset {
        Preset::Cifar10Small => vec![
            conv(32, 3, 1, 0),
            Batchnorm,
            Relu,
            POOL2,
            conv(16, 3, 1, 0),
            Batchnorm,
            Relu,
            POOL2,
            LayerSpec::Dense { out_features: 128 },
            Relu,
            LayerSpec::Dropout { p: 0.5 },
            LayerSpec::Dense {
                out_features: num_classes,
            },
            LayerSpec::SoftmaxOutput,
        ],
        Preset::AllconvBn => {
            let mut layers = Vec::new();
            for (f, k, s, p) in [
                (96, 3, 1, 1),
                (96, 3, 1, 1),
                (96, 3, 2, 1),
                (192, 3, 1, 1),
                (192, 3, 1, 1),
                (192, 3, 2, 1),
                (192, 3, 1, 0),
                (192, 1, 1, 0),
            ] {
                layers.extend([conv(f, k, s, p), Batchnorm, Relu]);
            }
            layers.extend([
                conv(num_classes, 1, 1, 0),
                Batchnorm,
                LayerSpec::GlobalAvgPool,
                LayerSpec::SoftmaxOutput,
            ]);
            layers
        }
    };
    let arch = ArchitectureSpec {
        name: preset.name().into(),
        num_classes,
        input_shape: [3, 32, 32],
        layers,
    };
    arch.infer_shapes()?;
    Ok(arch)
}

/// Allocates and initializes a network; shape errors surface here.
pub fn build_model<T: Scalar>(arch: ArchitectureSpec, seed: u64) -> Result<Network<T>> {
    Network::new(arch, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamHyper,
    pub patience: usize,
    pub seed: u64,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            batch_size: 128,
            adam: AdamHyper::default(),
            patience: 15,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch_size, patience and max_epochs must all be at least 1".into(),
            ));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be at least 1 when set".into()));
        }
        self.adam.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were restored.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub steps: u64,
}

impl TrainHistory {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }

    /// CSV with columns `epoch,train_loss,val_loss,val_acc`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "train_loss", "val_loss", "val_acc"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_loss.to_string(),
                e.val_acc.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation loss. Strict improvement resets the counter;
/// training stops once `patience` epochs pass without one.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best_epoch: usize,
    best_loss: f64,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_epoch: 0,
            best_loss: f64::INFINITY,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            StopDecision::Improved
        } else if epoch - self.best_epoch >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }
}

const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode accuracy and mean cross-entropy.
pub fn evaluate<T: Scalar>(net: &Network<T>, set: &TensorSet<T>) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let n = set.len();
    let starts: Vec<usize> = (0..n).step_by(EVAL_BATCH).collect();
    let parts: Vec<(usize, f64)> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + EVAL_BATCH).min(n);
            let logits = net.forward_eval(&set.x.slice_batch(s, e))?;
            let labels = &set.labels[s..e];
            let (loss, _) = softmax_xent(&logits, labels)?;
            let k = logits.shape()[1];
            let correct = logits
                .data()
                .chunks_exact(k)
                .zip(labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            Ok((correct, loss.to_f64_lossy() * (e - s) as f64))
        })
        .collect::<Result<_>>()?;
    let correct: usize = parts.iter().map(|p| p.0).sum();
    let loss: f64 = parts.iter().map(|p| p.1).sum();
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        loss: loss / n as f64,
    })
}

/// Predicted class per example.
pub fn predict<T: Scalar>(net: &Network<T>, set: &TensorSet<T>) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(set.len());
    for s in (0..set.len()).step_by(EVAL_BATCH) {
        let e = (s + EVAL_BATCH).min(set.len());
        let logits = net.forward_eval(&set.x.slice_batch(s, e))?;
        let k = logits.shape()[1];
        out.extend(logits.data().chunks_exact(k).map(argmax));
    }
    Ok(out)
}

fn non_finite(epoch: usize, batch: usize, layer: impl Into<String>) -> Error {
    Error::NonFiniteLoss {
        epoch,
        batch,
        layer: layer.into(),
    }
}

/// [`train`] with a callback after every epoch.
pub fn train_with<T: Scalar>(
    net: &mut Network<T>,
    train_set: &TensorSet<T>,
    val_set: &TensorSet<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Input("training and validation sets must be nonempty".into()));
    }
    net.init_optimizer_state();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = net.clone();
    let mut epochs = Vec::new();
    let mut step: u64 = 0;
    let n = train_set.len();
    let mut order: Vec<usize> = (0..n).collect();

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_from(cfg.seed, &[stream::SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut budget_hit = false;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train_set.select(idx);
            let mut rng = rng_from(cfg.seed, &[stream::DROPOUT, epoch as u64, b as u64]);
            net.zero_grad();
            let logits = match net.forward_train(&batch.x, &mut rng) {
                Ok(l) => l,
                Err(Error::Numeric(layer)) => return Err(non_finite(epoch, b, layer)),
                Err(e) => return Err(e),
            };
            let (loss, grad) = softmax_xent(&logits, &batch.labels)?;
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() {
                return Err(non_finite(epoch, b, "softmax-output"));
            }
            net.backward(&grad)?;
            step += 1;
            adam_step(&mut net.params_mut(), &cfg.adam, step)?;
            if let Some((name, _)) = net.named_params().into_iter().find(|(_, p)| !p.value.is_finite()) {
                return Err(non_finite(epoch, b, name));
            }
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
            if cfg.max_steps.is_some_and(|m| step >= m) {
                budget_hit = true;
                break;
            }
        }
        let val = evaluate(net, val_set)?;
        if !val.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "validation loss is not finite after epoch {epoch}"
            )));
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_loss: val.loss,
            val_acc: val.accuracy,
        };
        epochs.push(record);
        on_epoch(&record);
        match stopper.observe(epoch, val.loss) {
            StopDecision::Improved => best = net.clone(),
            StopDecision::Stop => break 'epochs,
            StopDecision::Continue => {}
        }
        if budget_hit {
            break;
        }
    }
    *net = best;
    Ok(TrainHistory {
        epochs,
        best_epoch: stopper.best_epoch(),
        best_val_loss: stopper.best_loss(),
        steps: step,
    })
}

/// Trains with Adam on shuffled mini-batches and restores the weights of the
/// epoch with the lowest validation loss. Parameter trainability masks and
/// batch-norm statistic freezes already set on `net` are honored.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    train_set: &TensorSet<T>,
    val_set: &TensorSet<T>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    train_with(net, train_set, val_set, cfg, |_| {})
}
