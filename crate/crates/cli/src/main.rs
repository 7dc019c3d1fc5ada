use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use filter_triage::config::{ExperimentConfig, RankMethod};
use filter_triage::data::{preprocess, read_dataset, write_dataset, ChannelStats, Dataset, TensorSet};
use filter_triage::distortion::{distort_dataset, DistortionSpec};
use filter_triage::exemplar::{nonassoc_rank, ranking_overlap, FeatureRep, MetricKind, NonAssocConfig};
use filter_triage::experiment::{load_or_train_baseline, prepare_data, rank_layer, run_experiment};
use filter_triage::finetune::{accuracy_curve, build_masks, finetune_cell, invariance_heatmap, CurveData};
use filter_triage::nn::checkpoint::{load_file, save_file};
use filter_triage::nn::CapturePoint;
use filter_triage::susceptibility::{
    sample_pairs, select_filters, selection_size, EmdMetric, FilterRanking, SelectionMode,
};
use filter_triage::zoo::evaluate;
use filter_triage::Network32;

#[derive(Parser)]
#[command(
    name = "filter-triage",
    version,
    about = "Rank CNN filters by distortion susceptibility and fine-tune the worst ones"
)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every single-valued seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs/latest")]
    out_dir: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load or train the baseline and save it with the data splits.
    TrainBaseline,
    /// Distort a dataset file.
    Distort(DistortArgs),
    /// Associative ranking from clean/distorted pairs.
    RankAssoc(RankAssocArgs),
    /// Non-associative ranking from dataset exemplars.
    RankNonassoc(RankNonassocArgs),
    /// Fine-tune selected filters of a baseline.
    Finetune(FinetuneArgs),
    /// Accuracy-vs-train-size curve for the configured modes.
    Curve(CurveArgs),
    /// Binarized Hamming disparity heatmaps.
    Invariance(InvarianceArgs),
    /// Top-k overlap of two rankings.
    CompareRankings(CompareArgs),
    /// Full pipeline from the configuration.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Awgn,
    Blur,
}

#[derive(Args)]
struct DistortArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    sigma: f64,
}

#[derive(Args)]
struct Model {
    /// Baseline checkpoint (.ftrg).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Normalization statistics saved with the baseline.
    #[arg(long)]
    stats: PathBuf,
}

#[derive(Args)]
struct RankAssocArgs {
    #[command(flatten)]
    model: Model,
    #[arg(long)]
    clean: PathBuf,
    /// Distorted versions of `--clean`, same ids in the same order.
    #[arg(long)]
    distorted: PathBuf,
    #[arg(long)]
    layer: usize,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long, value_enum)]
    metric: Option<Emd>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Emd {
    Marginal,
    Exact,
}

impl From<Emd> for EmdMetric {
    fn from(e: Emd) -> Self {
        match e {
            Emd::Marginal => EmdMetric::Marginal,
            Emd::Exact => EmdMetric::Exact,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Features {
    Pixels,
    /// Collapsed feature-map activations of the ranked layer.
    Ftm,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Euclidean,
    Hamming,
}

#[derive(Args)]
struct RankNonassocArgs {
    #[command(flatten)]
    model: Model,
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    noisy: PathBuf,
    #[arg(long)]
    layer: usize,
    #[arg(long, value_enum, default_value = "pixels")]
    features: Features,
    #[arg(long, value_enum, default_value = "euclidean")]
    metric: Metric,
    /// Binarize activation features (implied by hamming).
    #[arg(long)]
    binarize: bool,
}

#[derive(Args)]
struct Rankings {
    /// `LAYER=PATH` of a ranking CSV; repeat per targeted layer.
    #[arg(long = "ranking", required = true, value_parser = parse_ranking_arg)]
    rankings: Vec<(usize, PathBuf)>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    model: Model,
    #[command(flatten)]
    rankings: Rankings,
    /// Distorted training pool the sample is drawn from.
    #[arg(long)]
    noisy_train: PathBuf,
    #[arg(long, value_enum, default_value = "most")]
    mode: Mode,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    train_size: usize,
    #[arg(long, default_value_t = 1)]
    replicate: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Most,
    Least,
    All,
}

impl From<Mode> for SelectionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Most => SelectionMode::Most,
            Mode::Least => SelectionMode::Least,
            Mode::All => SelectionMode::All,
        }
    }
}

#[derive(Args)]
struct CurveArgs {
    #[command(flatten)]
    model: Model,
    #[command(flatten)]
    rankings: Rankings,
    #[arg(long)]
    noisy_train: PathBuf,
    #[arg(long)]
    clean_test: PathBuf,
    #[arg(long)]
    noisy_test: PathBuf,
}

#[derive(Args)]
struct InvarianceArgs {
    #[command(flatten)]
    model: Model,
    /// Fine-tuned checkpoint compared against the baseline.
    #[arg(long)]
    tuned: Option<PathBuf>,
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    noisy: PathBuf,
    #[arg(long)]
    layer: usize,
    #[arg(long, default_value_t = 20)]
    images: usize,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 1)]
    layer: usize,
    /// Top-k size; defaults to a quarter of the filters.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    /// Use the built-in synthetic smoke configuration.
    #[arg(long)]
    smoke: bool,
}

fn parse_ranking_arg(s: &str) -> std::result::Result<(usize, PathBuf), String> {
    let (l, p) = s.split_once('=').ok_or("expected LAYER=PATH")?;
    Ok((
        l.parse().map_err(|e| format!("bad layer `{l}`: {e}"))?,
        PathBuf::from(p),
    ))
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.override_seed(s);
    }
    Ok(cfg)
}

fn out(cli: &Cli, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    Ok(cli.out_dir.join(name))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_model(m: &Model) -> Result<(Network32, ChannelStats)> {
    let net = load_file(&m.checkpoint).with_context(|| format!("loading {}", m.checkpoint.display()))?;
    Ok((net, ChannelStats::load(&m.stats)?))
}

fn tensors(path: &Path, stats: &ChannelStats) -> Result<(Dataset, TensorSet<f32>)> {
    let ds = read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
    let t = preprocess(&ds, stats)?;
    Ok((ds, t))
}

fn load_rankings(r: &Rankings) -> Result<Vec<FilterRanking>> {
    r.rankings
        .iter()
        .map(|(l, p)| {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(FilterRanking::from_csv(*l, &text)?)
        })
        .collect()
}

/// The error chain on one line; causes already quoted by their parent are
/// skipped.
fn describe(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::TrainBaseline => {
            let cfg = config(&cli)?;
            filter_triage::experiment::preflight(&cfg)?;
            let data = prepare_data(&cfg.dataset)?;
            let (net, history) = load_or_train_baseline::<f32>(&cfg, &data)?;
            save_file(&net, &out(&cli, "baseline.ftrg")?)?;
            data.stats.save(&out(&cli, "stats.json")?)?;
            for (name, ds) in [
                ("train.ftds", &data.train),
                ("val.ftds", &data.val),
                ("test.ftds", &data.test),
            ] {
                write_dataset(ds, &out(&cli, name)?)?;
            }
            if let Some(h) = history {
                h.write_csv(&out(&cli, "baseline_history.csv")?)?;
            }
            let acc = evaluate(&net, &preprocess(&data.test, &data.stats)?)?.accuracy;
            println!("baseline clean test accuracy {acc:.4}");
        }
        Command::Distort(a) => {
            let mut spec = match a.kind {
                Kind::Awgn => DistortionSpec::awgn(a.sigma, 0),
                Kind::Blur => DistortionSpec::blur(a.sigma, 0),
            };
            spec.seed = cli.seed.unwrap_or(0);
            let ds = read_dataset(&a.input)?;
            write_dataset(&distort_dataset(&ds, &spec)?, &a.output)?;
            println!("wrote {} ({} images, {})", a.output.display(), ds.len(), spec.tag());
        }
        Command::RankAssoc(a) => {
            let cfg = config(&cli)?;
            let (net, stats) = load_model(&a.model)?;
            let (clean, ct) = tensors(&a.clean, &stats)?;
            let (noisy, nt) = tensors(&a.distorted, &stats)?;
            if clean.ids != noisy.ids {
                bail!("--clean and --distorted must hold the same image ids in the same order");
            }
            let mut rc = cfg.ranking.clone();
            if let Some(m) = a.metric {
                rc.emd = m.into();
            }
            let idx = sample_pairs(clean.len(), a.pairs.unwrap_or(rc.pairs), rc.seed)?;
            let ids: Vec<u64> = idx.iter().map(|&i| clean.ids[i]).collect();
            let r = rank_layer(
                &net,
                &ct.x.select_batch(&idx),
                &nt.x.select_batch(&idx),
                &ids,
                a.layer,
                &rc,
                RankMethod::Assoc,
            )?;
            if let Some(d) = &r.distances {
                write(&out(&cli, &format!("distances_layer{}.csv", a.layer))?, &d.to_csv()?)?;
            }
            write(
                &out(&cli, &format!("ranking_layer{}.csv", a.layer))?,
                &r.ranking.to_csv()?,
            )?;
            println!("layer {} top filters {:?}", a.layer, r.ranking.top(8));
        }
        Command::RankNonassoc(a) => {
            let cfg = config(&cli)?;
            let (net, stats) = load_model(&a.model)?;
            let (_, ct) = tensors(&a.clean, &stats)?;
            let (_, nt) = tensors(&a.noisy, &stats)?;
            let metric = match a.metric {
                Metric::Euclidean => MetricKind::Euclidean,
                Metric::Hamming => MetricKind::Hamming,
            };
            let rep = match a.features {
                Features::Pixels => FeatureRep::pixels(),
                Features::Ftm => FeatureRep::activations(a.layer, a.binarize || metric == MetricKind::Hamming),
            };
            let na = NonAssocConfig {
                layer_id: a.layer,
                rep,
                metric,
                emd_metric: cfg.ranking.emd,
                capture: CapturePoint::PostRelu,
                max_points: cfg.ranking.nonassoc.max_points,
                seed: cfg.ranking.seed,
            };
            let r = nonassoc_rank(&net, &ct.x, &nt.x, &na)?;
            write(
                &out(&cli, &format!("ranking_layer{}.csv", a.layer))?,
                &r.ranking.to_csv()?,
            )?;
            write(&out(&cli, &format!("exemplars_layer{}.json", a.layer))?, &r.report()?)?;
            println!(
                "exemplars: clean #{} (total {:.4}), noisy #{} (total {:.4})",
                r.clean.index, r.clean.total_distance, r.noisy.index, r.noisy.total_distance
            );
        }
        Command::Finetune(a) => {
            let cfg = config(&cli)?;
            let (net, stats) = load_model(&a.model)?;
            let rankings = load_rankings(&a.rankings)?;
            let (_, pool) = tensors(&a.noisy_train, &stats)?;
            let fraction = a.fraction.unwrap_or(cfg.finetune.fraction);
            let sels = rankings
                .iter()
                .map(|r| select_filters(r, a.mode.into(), fraction))
                .collect::<filter_triage::Result<Vec<_>>>()?;
            let plan = build_masks(&net, &sels, cfg.finetune.freeze_classifier)?;
            let (tuned, history) = finetune_cell(&net, &plan, &pool, a.train_size, a.replicate, &cfg.finetune.train)?;
            save_file(&tuned, &out(&cli, "finetuned.ftrg")?)?;
            history.write_csv(&out(&cli, "finetune_history.csv")?)?;
            println!(
                "fine-tuned {} parameters for {} epochs",
                tuned.trainable_param_count(),
                history.epochs_run()
            );
        }
        Command::Curve(a) => {
            let cfg = config(&cli)?;
            let (net, stats) = load_model(&a.model)?;
            let rankings = load_rankings(&a.rankings)?;
            let (_, pool) = tensors(&a.noisy_train, &stats)?;
            let (_, clean_test) = tensors(&a.clean_test, &stats)?;
            let (_, noisy_test) = tensors(&a.noisy_test, &stats)?;
            let data = CurveData {
                noisy_pool: &pool,
                noisy_test: &noisy_test,
                clean_test: &clean_test,
            };
            let curve = accuracy_curve(&net, &rankings, &data, &cfg.finetune)?;
            write(&out(&cli, "curve.csv")?, &curve.to_csv()?)?;
            for (mode, n, m) in curve.medians() {
                println!("{mode} n={n} median noisy accuracy {m:.4}");
            }
        }
        Command::Invariance(a) => {
            let (net, stats) = load_model(&a.model)?;
            let tuned: Option<Network32> = a.tuned.as_deref().map(load_file).transpose()?;
            let (clean, ct) = tensors(&a.clean, &stats)?;
            let (noisy, nt) = tensors(&a.noisy, &stats)?;
            if clean.ids != noisy.ids {
                bail!("--clean and --noisy must hold the same image ids in the same order");
            }
            let mut w = String::from("image_id,layer_id,baseline_total,finetuned_total\n");
            for i in 0..a.images.min(clean.len()) {
                let (x, y) = (ct.x.slice_batch(i, i + 1), nt.x.slice_batch(i, i + 1));
                let base = invariance_heatmap(&net, &x, &y, a.layer)?;
                let id = clean.ids[i];
                write(
                    &out(&cli, &format!("heatmap_img{id}_layer{}_baseline.csv", a.layer))?,
                    &base.to_csv()?,
                )?;
                let other = match &tuned {
                    Some(t) => {
                        let h = invariance_heatmap(t, &x, &y, a.layer)?;
                        write(
                            &out(&cli, &format!("heatmap_img{id}_layer{}_tuned.csv", a.layer))?,
                            &h.to_csv()?,
                        )?;
                        h.total.to_string()
                    }
                    None => String::new(),
                };
                w.push_str(&format!("{id},{},{},{other}\n", a.layer, base.total));
            }
            write(&out(&cli, "invariance.csv")?, &w)?;
            print!("{w}");
        }
        Command::CompareRankings(a) => {
            let read = |p: &Path| -> Result<FilterRanking> {
                Ok(FilterRanking::from_csv(a.layer, &std::fs::read_to_string(p)?)?)
            };
            let (ra, rb) = (read(&a.a)?, read(&a.b)?);
            let k = match a.k {
                Some(k) => k,
                None => selection_size(ra.filters(), 0.25)?,
            };
            let o = ranking_overlap(&ra, &rb, k)?;
            println!("layer,filters,k,overlap,chance_mean");
            println!(
                "{},{},{k},{o},{}",
                a.layer,
                ra.filters(),
                (k * k) as f64 / ra.filters() as f64
            );
        }
        Command::Run(a) => {
            let mut cfg = if a.smoke {
                ExperimentConfig::smoke()
            } else {
                config(&cli)?
            };
            if a.smoke {
                if let Some(s) = cli.seed {
                    cfg.override_seed(s);
                }
            } else if cli.config.is_none() {
                bail!("`run` needs --config <file> or --smoke");
            }
            let report = run_experiment(&cfg, &cli.out_dir)?;
            println!(
                "baseline accuracy clean {:.4} noisy {:.4}; {} artifacts in {}",
                report.baseline_clean.accuracy,
                report.baseline_noisy.accuracy,
                report.artifacts.len(),
                report.out_dir.display()
            );
        }
    }
    Ok(())
}
