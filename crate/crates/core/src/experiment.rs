//! End-to-end runs: data → baseline → distortion → ranking → fine-tuning
//! curve → invariance heatmaps, with every artifact listed in a manifest.
//!
//! Run directory layout:
//!
//! ```text
//! config.toml              resolved configuration
//! stats.json               per-channel normalization of the clean train split
//! baseline.ftrg            baseline checkpoint
//! baseline_history.csv     only when the baseline was trained here
//! baseline_eval.csv
//! distances_layer{L}.csv   associative rankings only
//! ranking_layer{L}.csv
//! exemplars_layer{L}.json  non-associative rankings only
//! overlap.csv              when ranking.compare is set
//! rank_summary.csv
//! curve.csv, curve_medians.csv
//! invariance.csv, heatmaps/
//! manifest.json
//! FAILED                   written when a stage fails
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{DatasetConfig, DatasetKind, ExperimentConfig, Precision, RankMethod, RankingConfig};
use crate::data::cifar::TEST_ID_OFFSET;
use crate::data::synthetic::{synthetic_dataset, SyntheticSpec};
use crate::data::{
    compute_stats, load_cifar10, load_cifar100, preprocess, split, ChannelStats, CifarPart, Dataset, LoadOptions,
    SplitTag, TensorSet,
};
use crate::distortion::distort_dataset;
use crate::error::{Error, Result};
use crate::exemplar::{nonassoc_rank, ranking_overlap, NonAssocConfig, NonAssocResult};
use crate::finetune::{accuracy_curve, build_masks, finetune_cell, invariance_heatmap, AccuracyCurve, CurveData};
use crate::nn::checkpoint::{checkpoint_save, load_file};
use crate::nn::Network;
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;
use crate::susceptibility::{
    borda_mass_share, compute_distance_matrix, finish_csv, sample_indices, sample_pairs, select_filters,
    selection_size, DistanceMatrix, FilterRanking, SelectionMode,
};
use crate::tensor::Tensor;
use crate::zoo::{architecture, build_model, evaluate, train, Evaluation, TrainHistory};

pub const FAILED_MARKER: &str = "FAILED";
pub const MANIFEST: &str = "manifest.json";

/// Clean splits and the normalization computed on the training side.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub stats: ChannelStats,
}

fn limit(ds: Dataset, cap: Option<usize>, seed: u64, which: u64) -> Result<Dataset> {
    match cap {
        Some(n) if n < ds.len() => {
            let idx = sample_indices(ds.len(), n, derive_seed(seed, &[which]), stream::SUBSAMPLE)?;
            Ok(ds.subset(&idx))
        }
        _ => Ok(ds),
    }
}

/// Checks that inputs named by the configuration exist, before any work.
pub fn preflight(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    if let Some(p) = &cfg.model.checkpoint {
        if !p.is_file() {
            return Err(Error::Input(format!(
                "baseline checkpoint {} does not exist",
                p.display()
            )));
        }
    }
    if let (DatasetKind::Cifar10 | DatasetKind::Cifar100, Some(p)) = (cfg.dataset.kind, &cfg.dataset.path) {
        if !p.is_dir() {
            return Err(Error::Input(format!(
                "dataset directory {} does not exist",
                p.display()
            )));
        }
    }
    Ok(())
}

/// Loads the training pool and test set, applies the optional caps, splits
/// the pool and computes normalization on the clean training split.
pub fn prepare_data(cfg: &DatasetConfig) -> Result<PreparedData> {
    let seed = cfg.split.seed;
    let opts = LoadOptions {
        strict_counts: cfg.strict_counts,
    };
    let (pool, test) = match cfg.kind {
        DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
            let dir = cfg
                .path
                .as_deref()
                .ok_or_else(|| Error::Config("dataset.path is required for CIFAR datasets".into()))?;
            let load = if cfg.kind == DatasetKind::Cifar10 {
                load_cifar10
            } else {
                load_cifar100
            };
            (load(dir, CifarPart::Train, opts)?, load(dir, CifarPart::Test, opts)?)
        }
        DatasetKind::Synthetic => {
            let mut spec = SyntheticSpec::cifar_like(cfg.class_count(), cfg.synthetic_per_class, seed);
            spec.noise = cfg.synthetic_noise;
            let pool = synthetic_dataset(&spec, SplitTag::Train)?;
            spec.per_class = cfg.synthetic_test_per_class;
            spec.id_offset = TEST_ID_OFFSET;
            (pool, synthetic_dataset(&spec, SplitTag::Test)?)
        }
    };
    let pool = limit(pool, cfg.train_limit, seed, 1)?;
    let test = limit(test, cfg.test_limit, seed, 2)?;
    let (train, val) = split(&pool, &cfg.split)?;
    let stats = compute_stats(&train)?;
    Ok(PreparedData {
        train,
        val,
        test,
        stats,
    })
}

/// Loads `cfg.model.checkpoint` (checking that it matches the configured
/// architecture) or trains a fresh baseline.
pub fn load_or_train_baseline<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &PreparedData,
) -> Result<(Network<T>, Option<TrainHistory>)> {
    let arch = architecture(cfg.model.architecture, cfg.dataset.class_count())?;
    if let Some(path) = &cfg.model.checkpoint {
        let net: Network<T> = load_file(path)?;
        if *net.arch() != arch {
            return Err(Error::Config(format!(
                "checkpoint {} holds `{}`, configuration expects `{}` with {} classes",
                path.display(),
                net.arch().name,
                arch.name,
                arch.num_classes
            )));
        }
        return Ok((net, None));
    }
    let mut net = build_model(arch, cfg.model.init_seed)?;
    let tr = preprocess::<T>(&data.train, &data.stats)?;
    let va = preprocess::<T>(&data.val, &data.stats)?;
    let history = train(&mut net, &tr, &va, &cfg.baseline)?;
    Ok((net, Some(history)))
}

/// One layer's ranking with the evidence it was built from.
#[derive(Debug, Clone)]
pub struct LayerRanking {
    pub ranking: FilterRanking,
    pub distances: Option<DistanceMatrix>,
    pub nonassoc: Option<NonAssocResult>,
}

/// Ranks one conv layer. `clean` and `noisy` are index-aligned images of the
/// training split; associative ranking uses them as pairs, non-associative
/// ranking takes clean images from the first half and distorted images from
/// the second half so no pair is shared.
pub fn rank_layer<T: Scalar>(
    net: &Network<T>,
    clean: &Tensor<T>,
    noisy: &Tensor<T>,
    ids: &[u64],
    layer_id: usize,
    cfg: &RankingConfig,
    method: RankMethod,
) -> Result<LayerRanking> {
    match method {
        RankMethod::Assoc => {
            let d = compute_distance_matrix(net, clean, noisy, ids, layer_id, cfg.emd, cfg.capture)?;
            Ok(LayerRanking {
                ranking: crate::susceptibility::borda_rank(&d),
                distances: Some(d),
                nonassoc: None,
            })
        }
        RankMethod::Nonassoc => {
            let n = clean.batch();
            let (a, b) = if n >= 2 {
                (clean.slice_batch(0, n / 2), noisy.slice_batch(n / 2, n))
            } else {
                (clean.clone(), noisy.clone())
            };
            let na = NonAssocConfig {
                layer_id,
                rep: cfg.nonassoc.rep(layer_id),
                metric: cfg.nonassoc.metric,
                emd_metric: cfg.emd,
                capture: cfg.capture,
                max_points: cfg.nonassoc.max_points,
                seed: cfg.seed,
            };
            let r = nonassoc_rank(net, &a, &b, &na)?;
            Ok(LayerRanking {
                ranking: r.ranking.clone(),
                distances: None,
                nonassoc: Some(r),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapRow {
    pub layer_id: usize,
    pub filters: usize,
    pub k: usize,
    pub overlap: usize,
    /// Expected overlap of two random top-k sets, k²/F.
    pub chance_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceRow {
    pub image_id: u64,
    pub layer_id: usize,
    pub baseline_total: u64,
    pub finetuned_total: u64,
}

#[derive(Debug, Clone, Serialize)]
struct Artifact {
    path: String,
    bytes: usize,
    sha256: String,
}

#[derive(Debug, Clone, Serialize)]
struct StageTiming {
    stage: String,
    seconds: f64,
}

/// Headline numbers of a finished run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub baseline_clean: Evaluation,
    pub baseline_noisy: Evaluation,
    pub rankings: Vec<FilterRanking>,
    pub overlaps: Vec<OverlapRow>,
    pub curve: AccuracyCurve,
    pub invariance: Vec<InvarianceRow>,
    pub artifacts: Vec<String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

struct Recorder {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
    stages: Vec<StageTiming>,
}

impl Recorder {
    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.artifacts.push(Artifact {
            path: rel.to_string(),
            bytes: bytes.len(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn stage<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        let start = Instant::now();
        let out = f(self);
        self.stages.push(StageTiming {
            stage: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out.map_err(|e| {
            let e = e.in_stage(name);
            let _ = std::fs::write(self.dir.join(FAILED_MARKER), format!("{e}\n"));
            e
        })
    }
}

fn csv_rows<R: Serialize>(rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    finish_csv(w)
}

#[derive(Serialize)]
struct EvalRow {
    model: &'static str,
    clean_test_acc: f64,
    noisy_test_acc: f64,
    clean_test_loss: f64,
    noisy_test_loss: f64,
}

#[derive(Serialize)]
struct SummaryRow {
    layer_id: usize,
    method: RankMethod,
    filters: usize,
    top_quartile_borda_share: f64,
}

#[derive(Serialize)]
struct MedianRow {
    mode: SelectionMode,
    train_size: usize,
    median_noisy_test_acc: f64,
}

/// Runs every stage into `out_dir`. On failure the error names the stage,
/// outputs written so far are kept and a `FAILED` marker is left behind.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunReport> {
    preflight(cfg).map_err(|e| e.in_stage("preflight"))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let marker = out_dir.join(FAILED_MARKER);
    if marker.exists() {
        std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, out_dir),
        Precision::F64 => run_typed::<f64>(cfg, out_dir),
    }
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunReport> {
    let mut rec = Recorder {
        dir: out_dir.to_path_buf(),
        artifacts: Vec::new(),
        stages: Vec::new(),
    };
    let config_text = cfg.to_toml()?;
    rec.write("config.toml", config_text.as_bytes())?;

    let data = rec.stage("data", |rec| {
        let data = prepare_data(&cfg.dataset)?;
        rec.write("stats.json", serde_json::to_string_pretty(&data.stats)?.as_bytes())?;
        Ok(data)
    })?;

    let net: Network<T> = rec.stage("baseline", |rec| {
        let (net, history) = load_or_train_baseline::<T>(cfg, &data)?;
        if let Some(h) = history {
            rec.write("baseline_history.csv", h.to_csv()?.as_bytes())?;
        }
        rec.write("baseline.ftrg", &checkpoint_save(&net)?)?;
        Ok(net)
    })?;

    let (noisy_train, clean_test, noisy_test) = rec.stage("distort", |_| {
        let noisy_train = distort_dataset(&data.train, &cfg.distortion)?;
        let noisy_test = distort_dataset(&data.test, &cfg.distortion)?;
        Ok((
            preprocess::<T>(&noisy_train, &data.stats)?,
            preprocess::<T>(&data.test, &data.stats)?,
            preprocess::<T>(&noisy_test, &data.stats)?,
        ))
    })?;

    let (baseline_clean, baseline_noisy) = rec.stage("evaluate", |rec| {
        let c = evaluate(&net, &clean_test)?;
        let n = evaluate(&net, &noisy_test)?;
        let row = EvalRow {
            model: "baseline",
            clean_test_acc: c.accuracy,
            noisy_test_acc: n.accuracy,
            clean_test_loss: c.loss,
            noisy_test_loss: n.loss,
        };
        rec.write("baseline_eval.csv", csv_rows(&[row])?.as_bytes())?;
        Ok((c, n))
    })?;

    let (rankings, overlaps) = rec.stage("rank", |rec| {
        let idx = sample_pairs(data.train.len(), cfg.ranking.pairs, cfg.ranking.seed)?;
        let clean_train = preprocess::<T>(&data.train.subset(&idx), &data.stats)?;
        let noisy = noisy_train.x.select_batch(&idx);
        let ids: Vec<u64> = idx.iter().map(|&i| data.train.ids[i]).collect();
        let method = cfg.ranking.method;
        let mut rankings = Vec::new();
        let mut overlaps = Vec::new();
        let mut summary = Vec::new();
        for &layer in &cfg.ranking.layers {
            let r = rank_layer(&net, &clean_train.x, &noisy, &ids, layer, &cfg.ranking, method)?;
            if let Some(d) = &r.distances {
                rec.write(&format!("distances_layer{layer}.csv"), d.to_csv()?.as_bytes())?;
            }
            if let Some(na) = &r.nonassoc {
                rec.write(&format!("exemplars_layer{layer}.json"), na.report()?.as_bytes())?;
            }
            rec.write(&format!("ranking_layer{layer}.csv"), r.ranking.to_csv()?.as_bytes())?;
            summary.push(SummaryRow {
                layer_id: layer,
                method,
                filters: r.ranking.filters(),
                top_quartile_borda_share: borda_mass_share(&r.ranking, 0.25)?,
            });
            if cfg.ranking.compare {
                let other = match method {
                    RankMethod::Assoc => RankMethod::Nonassoc,
                    RankMethod::Nonassoc => RankMethod::Assoc,
                };
                let o = rank_layer(&net, &clean_train.x, &noisy, &ids, layer, &cfg.ranking, other)?;
                let tag = match other {
                    RankMethod::Assoc => "assoc",
                    RankMethod::Nonassoc => "nonassoc",
                };
                if let Some(na) = &o.nonassoc {
                    rec.write(&format!("exemplars_layer{layer}.json"), na.report()?.as_bytes())?;
                }
                rec.write(
                    &format!("ranking_layer{layer}_{tag}.csv"),
                    o.ranking.to_csv()?.as_bytes(),
                )?;
                let f = r.ranking.filters();
                let k = selection_size(f, cfg.finetune.fraction)?;
                overlaps.push(OverlapRow {
                    layer_id: layer,
                    filters: f,
                    k,
                    overlap: ranking_overlap(&r.ranking, &o.ranking, k)?,
                    chance_mean: (k * k) as f64 / f as f64,
                });
            }
            rankings.push(r.ranking);
        }
        rec.write("rank_summary.csv", csv_rows(&summary)?.as_bytes())?;
        if cfg.ranking.compare {
            rec.write("overlap.csv", csv_rows(&overlaps)?.as_bytes())?;
        }
        Ok((rankings, overlaps))
    })?;

    let curve = rec.stage("finetune", |rec| {
        let data = CurveData {
            noisy_pool: &noisy_train,
            noisy_test: &noisy_test,
            clean_test: &clean_test,
        };
        let curve = accuracy_curve(&net, &rankings, &data, &cfg.finetune)?;
        rec.write("curve.csv", curve.to_csv()?.as_bytes())?;
        let medians: Vec<MedianRow> = curve
            .medians()
            .into_iter()
            .map(|(mode, train_size, m)| MedianRow {
                mode,
                train_size,
                median_noisy_test_acc: m,
            })
            .collect();
        rec.write("curve_medians.csv", csv_rows(&medians)?.as_bytes())?;
        Ok(curve)
    })?;

    let invariance = if cfg.invariance.enabled {
        rec.stage("invariance", |rec| {
            run_invariance(
                rec,
                cfg,
                &net,
                &rankings,
                &noisy_train,
                &clean_test,
                &noisy_test,
                &data.test,
            )
        })?
    } else {
        Vec::new()
    };

    let artifacts: Vec<String> = rec.artifacts.iter().map(|a| a.path.clone()).collect();
    rec.stage("manifest", |rec| {
        let manifest = serde_json::json!({
            "tool": "filter-triage",
            "version": env!("CARGO_PKG_VERSION"),
            "config_sha256": sha256_hex(config_text.as_bytes()),
            "precision": cfg.precision,
            "seeds": {
                "split": cfg.dataset.split.seed,
                "init": cfg.model.init_seed,
                "baseline": cfg.baseline.seed,
                "distortion": cfg.distortion.seed,
                "ranking": cfg.ranking.seed,
                "finetune": cfg.finetune.seeds,
            },
            "dataset": {
                "train": data.train.len(),
                "val": data.val.len(),
                "test": data.test.len(),
                "source": data.train.provenance.source,
            },
            "notes": [
                format!("test set 100% distorted with {}", cfg.distortion.tag()),
                format!("medoid subsample threshold {}", cfg.ranking.nonassoc.max_points),
                "fine-tuning validation size ceil(n/4) drawn from the remaining distorted pool".to_string(),
            ],
            "stages": rec.stages,
            "artifacts": rec.artifacts,
        });
        let text = serde_json::to_string_pretty(&manifest)?;
        let path = rec.dir.join(MANIFEST);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    })?;

    Ok(RunReport {
        out_dir: out_dir.to_path_buf(),
        baseline_clean,
        baseline_noisy,
        rankings,
        overlaps,
        curve,
        invariance,
        artifacts,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_invariance<T: Scalar>(
    rec: &mut Recorder,
    cfg: &ExperimentConfig,
    net: &Network<T>,
    rankings: &[FilterRanking],
    noisy_train: &TensorSet<T>,
    clean_test: &TensorSet<T>,
    noisy_test: &TensorSet<T>,
    test: &Dataset,
) -> Result<Vec<InvarianceRow>> {
    let ft = &cfg.finetune;
    let n = cfg
        .invariance
        .train_size
        .unwrap_or(*ft.train_sizes.last().expect("validated"));
    let selections = rankings
        .iter()
        .map(|r| select_filters(r, SelectionMode::Most, ft.fraction))
        .collect::<Result<Vec<_>>>()?;
    let plan = build_masks(net, &selections, ft.freeze_classifier)?;
    let (tuned, _) = finetune_cell(net, &plan, noisy_train, n, ft.seeds[0], &ft.train)?;
    let count = cfg.invariance.images.min(test.len());
    let picks = sample_indices(test.len(), count, cfg.ranking.seed, stream::INVARIANCE)?;
    let mut rows = Vec::new();
    for &i in &picks {
        let (a, b) = (clean_test.x.slice_batch(i, i + 1), noisy_test.x.slice_batch(i, i + 1));
        for r in rankings {
            let base = invariance_heatmap(net, &a, &b, r.layer_id)?;
            let mine = invariance_heatmap(&tuned, &a, &b, r.layer_id)?;
            let id = test.ids[i];
            rec.write(
                &format!("heatmaps/img{id}_layer{}_baseline.csv", r.layer_id),
                base.to_csv()?.as_bytes(),
            )?;
            rec.write(
                &format!("heatmaps/img{id}_layer{}_most.csv", r.layer_id),
                mine.to_csv()?.as_bytes(),
            )?;
            rows.push(InvarianceRow {
                image_id: id,
                layer_id: r.layer_id,
                baseline_total: base.total,
                finetuned_total: mine.total,
            });
        }
    }
    rec.write("invariance.csv", csv_rows(&rows)?.as_bytes())?;
    Ok(rows)
}
