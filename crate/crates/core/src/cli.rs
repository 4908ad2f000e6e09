//! The `stgcn` command line: dataset construction, single-model training,
//! benchmark grids and dataset inspection.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure (divergence, every benchmark cell failing, unwritable output).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    build_finance_graph, load_dataset, read_coverage_csv, read_returns_csv, save_dataset, synthetic_generate,
    DistanceMode, SyntheticConfig, SyntheticKind, TemporalGraphDataset,
};
use crate::error::{Error, Result};
use crate::graph::{LambdaMax, SpectralOperators, DEFAULT_LAMBDA_TOL};
use crate::models::{build_model, ArchitectureName, ArchitectureSpec, GraphConvKind, SpecOverrides, DEFAULT_KERNEL};
use crate::params::Checkpoint;
use crate::training::{
    overfit_csv, overfit_summary, render_table, results_csv, run_benchmark, timings_csv, train, Monitor,
    TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "stgcn", version, about = "Spatio-temporal graph convolutional networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one architecture on one dataset.
    Train(TrainArgs),
    /// Train every architecture on every dataset.
    Benchmark(BenchmarkArgs),
    /// Build a dataset from a news coverage matrix and a returns table.
    BuildFinanceGraph(FinanceArgs),
    /// Generate a synthetic dataset.
    MakeSynthetic(SyntheticArgs),
    /// Print dataset and graph statistics.
    Inspect(InspectArgs),
}

/// Model and optimizer flags shared by `train` and `benchmark`. Unset
/// flags fall back to the `--config` file, then to built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainingFlags {
    /// JSON file with any of the keys of the resolved configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the dataset window.
    #[arg(long)]
    pub window: Option<usize>,
    /// Temporal kernel size.
    #[arg(long)]
    pub kernel: Option<usize>,
    /// Hidden channels.
    #[arg(long = "ch")]
    pub c_h: Option<usize>,
    /// Chebyshev order K.
    #[arg(long)]
    pub k_order: Option<usize>,
    /// Graph convolution used for order-1 blocks: chebyshev or first-order.
    #[arg(long)]
    pub graph_conv: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training fraction of the chronological split.
    #[arg(long)]
    pub split: Option<f64>,
    /// `auto` (power iteration) or a fixed positive value.
    #[arg(long)]
    pub lambda_max: Option<String>,
    /// Per-vertex z-scoring: true or false.
    #[arg(long)]
    pub normalize: Option<bool>,
    /// Batch normalization after graph and temporal blocks: true or false.
    #[arg(long)]
    pub batch_norm: Option<bool>,
    /// Monitor a 70/15/15 validation split instead of the test split.
    #[arg(long)]
    pub holdout_validation: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// st-gcn, cnn-gcn-cnn, cnn-gcn-cnn-lstm, cnn-gcn-lstm or gcn-lstm.
    #[arg(long)]
    pub model: Option<String>,
    /// Custom architecture JSON instead of --model.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Write a checkpoint of the restored model here.
    #[arg(long)]
    pub save: Option<PathBuf>,
    /// Directory for results.csv, timings.csv and config.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainingFlags,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Comma-separated dataset files.
    #[arg(long, value_delimiter = ',')]
    pub datasets: Vec<PathBuf>,
    /// Use the three generated datasets (ar1, seasonal, noise).
    #[arg(long)]
    pub synthetic_suite: bool,
    /// Comma-separated architecture names; all five by default.
    #[arg(long, value_delimiter = ',')]
    pub models: Vec<String>,
    /// Parallel grid cells.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Directory for results.csv, timings.csv, overfit.csv, table.txt and
    /// config.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainingFlags,
}

#[derive(Debug, Args)]
pub struct FinanceArgs {
    #[arg(long)]
    pub coverage: PathBuf,
    #[arg(long)]
    pub returns: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub window: usize,
    /// cosine_distance or cosine_similarity.
    #[arg(long, default_value = "cosine_distance")]
    pub distance_mode: String,
    #[arg(long, default_value = "finance")]
    pub name: String,
    /// Output dataset JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    /// ar1, seasonal or noise.
    #[arg(long, default_value = "ar1")]
    pub kind: String,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 96)]
    pub t: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.4)]
    pub density: f64,
    #[arg(long, default_value_t = 12)]
    pub window: usize,
    /// Neighbour coupling strength.
    #[arg(long, default_value_t = 0.4)]
    pub coupling: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// `auto` or a fixed value.
    #[arg(long)]
    pub lambda_max: Option<String>,
}

/// Keys accepted in a `--config` file; all optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub window: Option<usize>,
    pub kernel: Option<usize>,
    pub c_h: Option<usize>,
    pub k_order: Option<usize>,
    pub graph_conv: Option<GraphConvKind>,
    pub learning_rate: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub split_fraction: Option<f64>,
    pub lambda_max: Option<LambdaMax>,
    pub normalize: Option<bool>,
    pub batch_norm: Option<bool>,
    pub monitor: Option<Monitor>,
}

/// Everything a run depends on, echoed before work starts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub window: Option<usize>,
    pub architecture: SpecOverrides,
    pub training: TrainConfig,
}

fn parse_lambda_max(s: &str) -> Result<LambdaMax> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(LambdaMax::PowerIteration { tol: DEFAULT_LAMBDA_TOL });
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(LambdaMax::Fixed(v)),
        _ => Err(Error::InvalidConfig(format!("--lambda-max must be 'auto' or a positive number, got '{s}'"))),
    }
}

fn parse_graph_conv(s: &str) -> Result<GraphConvKind> {
    match s.replace('_', "-").to_ascii_lowercase().as_str() {
        "chebyshev" | "cheb" => Ok(GraphConvKind::Chebyshev),
        "first-order" | "kipf" => Ok(GraphConvKind::FirstOrder),
        _ => Err(Error::InvalidConfig(format!("--graph-conv must be chebyshev or first-order, got '{s}'"))),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn to_json<T: Serialize>(value: &T, context: &str) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        context: context.into(),
        source: e,
    })
}

/// Applies flags over the config file over defaults.
pub fn resolve(flags: &TrainingFlags) -> Result<ResolvedConfig> {
    let file = match &flags.config {
        Some(path) => serde_json::from_str::<ConfigFile>(&read_text(path)?).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })?,
        None => ConfigFile::default(),
    };
    let d = TrainConfig::default();
    let o = SpecOverrides::default();
    let lambda_max = match &flags.lambda_max {
        Some(s) => parse_lambda_max(s)?,
        None => file.lambda_max.unwrap_or(o.lambda_max),
    };
    let graph_conv = match &flags.graph_conv {
        Some(s) => parse_graph_conv(s)?,
        None => file.graph_conv.unwrap_or(o.graph_conv),
    };
    let monitor = if flags.holdout_validation {
        Monitor::Holdout
    } else {
        file.monitor.unwrap_or(d.monitor)
    };
    let architecture = SpecOverrides {
        kernel: flags.kernel.or(file.kernel).unwrap_or(DEFAULT_KERNEL),
        c_h: flags.c_h.or(file.c_h),
        k_order: flags.k_order.or(file.k_order),
        graph_conv,
        lambda_max,
        batch_norm: flags.batch_norm.or(file.batch_norm).unwrap_or(o.batch_norm),
    };
    let training = TrainConfig {
        learning_rate: flags.lr.or(file.learning_rate).unwrap_or(d.learning_rate),
        max_epochs: flags.epochs.or(file.max_epochs).unwrap_or(d.max_epochs),
        patience: flags.patience.or(file.patience).unwrap_or(d.patience),
        batch_size: flags.batch.or(file.batch_size).unwrap_or(d.batch_size),
        seed: flags.seed.or(file.seed).unwrap_or(d.seed),
        split_fraction: flags.split.or(file.split_fraction).unwrap_or(d.split_fraction),
        normalize: flags.normalize.or(file.normalize).unwrap_or(d.normalize),
        monitor,
        ..d
    };
    training.validate()?;
    if architecture.kernel == 0 {
        return Err(Error::InvalidConfig("--kernel must be at least 1".into()));
    }
    if architecture.c_h == Some(0) {
        return Err(Error::InvalidConfig("--ch must be at least 1".into()));
    }
    Ok(ResolvedConfig {
        window: flags.window.or(file.window),
        architecture,
        training,
    })
}

fn apply_window(ds: TemporalGraphDataset, window: Option<usize>) -> Result<TemporalGraphDataset> {
    match window {
        Some(w) if w != ds.window => ds.with_window(w),
        _ => Ok(ds),
    }
}

fn echo_config(out: &mut dyn Write, command: &str, value: &impl Serialize) -> Result<()> {
    let text = to_json(value, "config")?;
    let _ = writeln!(out, "# {command} configuration\n{text}");
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

#[derive(Serialize)]
struct SavedModel<'a> {
    spec: &'a ArchitectureSpec,
    parameters: Checkpoint,
}

fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = resolve(&args.flags)?;
    let ds = apply_window(load_dataset(&args.dataset)?, cfg.window)?;
    let spec = match (&args.model, &args.spec) {
        (Some(_), Some(_)) => return Err(Error::InvalidConfig("use either --model or --spec, not both".into())),
        (None, None) => return Err(Error::InvalidConfig("--model or --spec is required".into())),
        (Some(name), None) => ArchitectureSpec::canonical(name.parse()?, ds.window, &cfg.architecture)?,
        (None, Some(path)) => {
            let mut spec = ArchitectureSpec::from_json(&read_text(path)?)?;
            if spec.window != ds.window {
                return Err(Error::InvalidConfig(format!(
                    "spec window {} differs from dataset window {}",
                    spec.window, ds.window
                )));
            }
            spec.batch_norm &= cfg.architecture.batch_norm;
            spec
        }
    };
    #[derive(Serialize)]
    struct Echo<'a> {
        dataset: &'a Path,
        dataset_name: &'a str,
        window: usize,
        architecture: &'a ArchitectureSpec,
        training: &'a TrainConfig,
    }
    echo_config(
        out,
        "train",
        &Echo {
            dataset: &args.dataset,
            dataset_name: &ds.name,
            window: ds.window,
            architecture: &spec,
            training: &cfg.training,
        },
    )?;
    let model = build_model(&spec, &ds.graph, cfg.training.seed)?;
    let outcome = train(model, &ds, &cfg.training)?;
    let r = &outcome.result;
    let _ = writeln!(
        out,
        "{} on {}: train MSE {:.6}, test MSE {:.6}, wall time {:.3}s, {} epochs (best {}), overfit ratio {:.4}",
        r.model_name, r.dataset_name, r.train_mse, r.test_mse, r.wall_time_seconds, r.epochs_run, r.best_epoch, r.overfit_ratio
    );
    let rows = std::slice::from_ref(r);
    let csv = results_csv(rows)?;
    let _ = write!(out, "{csv}");
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_text(&dir.join("results.csv"), &csv)?;
        write_text(&dir.join("timings.csv"), &timings_csv(rows)?)?;
        write_text(&dir.join("config.json"), &to_json(&cfg, "config")?)?;
    }
    if let Some(path) = &args.save {
        let saved = SavedModel {
            spec: outcome.model.spec(),
            parameters: outcome.model.checkpoint(),
        };
        write_text(path, &to_json(&saved, "checkpoint")?)?;
        let _ = writeln!(out, "checkpoint written to {}", path.display());
    }
    Ok(EXIT_OK)
}

/// Datasets of `--synthetic-suite`: small enough for every architecture
/// at kernel 3 to fit its window.
pub fn synthetic_suite(seed: u64) -> Result<Vec<TemporalGraphDataset>> {
    SyntheticKind::ALL
        .into_iter()
        .enumerate()
        .map(|(i, kind)| {
            let mut cfg = SyntheticConfig::new(kind, 6, 72, seed.wrapping_add(i as u64));
            cfg.window = 12;
            synthetic_generate(&cfg)
        })
        .collect()
}

fn cmd_benchmark(args: &BenchmarkArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = resolve(&args.flags)?;
    if args.workers == 0 {
        return Err(Error::InvalidConfig("--workers must be at least 1".into()));
    }
    let mut datasets = Vec::new();
    if args.synthetic_suite {
        datasets.extend(synthetic_suite(cfg.training.seed)?);
    }
    for path in &args.datasets {
        datasets.push(load_dataset(path)?);
    }
    if datasets.is_empty() {
        return Err(Error::InvalidConfig("pass --datasets or --synthetic-suite".into()));
    }
    let datasets = datasets
        .into_iter()
        .map(|ds| apply_window(ds, cfg.window))
        .collect::<Result<Vec<_>>>()?;
    let models: Vec<ArchitectureName> = if args.models.is_empty() {
        ArchitectureName::CANONICAL.to_vec()
    } else {
        args.models.iter().map(|m| m.parse()).collect::<Result<_>>()?
    };
    #[derive(Serialize)]
    struct Echo<'a> {
        datasets: Vec<String>,
        models: Vec<&'static str>,
        workers: usize,
        #[serde(flatten)]
        resolved: &'a ResolvedConfig,
    }
    echo_config(
        out,
        "benchmark",
        &Echo {
            datasets: datasets.iter().map(|d| d.name.clone()).collect(),
            models: models.iter().map(|m| m.as_str()).collect(),
            workers: args.workers,
            resolved: &cfg,
        },
    )?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start {} workers: {e}", args.workers)))?;
    let results = pool.install(|| run_benchmark(&datasets, &models, &cfg.architecture, &cfg.training));
    for r in results.iter().filter(|r| !r.succeeded()) {
        let _ = writeln!(
            out,
            "cell {} / {} failed: {}",
            r.dataset_name,
            r.model_name,
            r.error.as_deref().unwrap_or_default()
        );
    }
    let table = render_table(&results);
    let _ = write!(out, "\n{table}\n");
    let summary = overfit_summary(&results);
    let csv = results_csv(&results)?;
    let _ = write!(out, "{csv}");
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_text(&dir.join("results.csv"), &csv)?;
        write_text(&dir.join("timings.csv"), &timings_csv(&results)?)?;
        write_text(&dir.join("overfit.csv"), &overfit_csv(&summary)?)?;
        write_text(&dir.join("table.txt"), &table)?;
        write_text(&dir.join("config.json"), &to_json(&cfg, "config")?)?;
        let _ = writeln!(out, "results written to {}", dir.display());
    }
    Ok(if results.iter().any(|r| r.succeeded()) { EXIT_OK } else { EXIT_RUNTIME })
}

fn cmd_build_finance_graph(args: &FinanceArgs, out: &mut dyn Write) -> Result<i32> {
    let mode: DistanceMode = args.distance_mode.parse()?;
    echo_config(
        out,
        "build-finance-graph",
        &serde_json::json!({
            "coverage": args.coverage,
            "returns": args.returns,
            "window": args.window,
            "distance_mode": mode,
            "name": args.name,
            "out": args.out,
        }),
    )?;
    let coverage = read_coverage_csv(&args.coverage)?;
    let (labels, returns) = read_returns_csv(&args.returns)?;
    if labels.len() == coverage.companies.len() && labels != coverage.companies {
        return Err(Error::InvalidDataset(
            "returns rows must list the same companies, in the same order, as the coverage matrix".into(),
        ));
    }
    let ds = build_finance_graph(&coverage, &returns, mode, args.window, &args.name)?;
    save_dataset(&ds, &args.out)?;
    let edges = ds.graph.edges();
    let (lo, hi) = edges
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| (lo.min(e.2), hi.max(e.2)));
    let _ = writeln!(
        out,
        "N = {}, edges = {}, weight range = [{}, {}], T = {}, samples = {}",
        ds.n_vertices(),
        edges.len(),
        if edges.is_empty() { 0.0 } else { lo },
        if edges.is_empty() { 0.0 } else { hi },
        ds.t_total(),
        ds.sample_count()
    );
    Ok(EXIT_OK)
}

fn cmd_make_synthetic(args: &SyntheticArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = SyntheticConfig::new(args.kind.parse()?, args.n, args.t, args.seed);
    cfg.graph_density = args.density;
    cfg.window = args.window;
    cfg.coupling = args.coupling;
    echo_config(out, "make-synthetic", &cfg)?;
    let ds = synthetic_generate(&cfg)?;
    save_dataset(&ds, &args.out)?;
    let _ = writeln!(
        out,
        "wrote {}: N = {}, T = {}, edges = {}, samples = {}",
        args.out.display(),
        ds.n_vertices(),
        ds.t_total(),
        ds.graph.edges().len(),
        ds.sample_count()
    );
    Ok(EXIT_OK)
}

fn cmd_inspect(args: &InspectArgs, out: &mut dyn Write) -> Result<i32> {
    let mode = match &args.lambda_max {
        Some(s) => parse_lambda_max(s)?,
        None => LambdaMax::default(),
    };
    echo_config(out, "inspect", &serde_json::json!({ "dataset": args.dataset, "lambda_max": mode }))?;
    let ds = load_dataset(&args.dataset)?;
    let ops = SpectralOperators::from_graph(&ds.graph, mode)?;
    let edges = ds.graph.edges();
    let _ = writeln!(out, "name:         {}", ds.name);
    let _ = writeln!(out, "vertices:     {}", ds.n_vertices());
    let _ = writeln!(out, "edges:        {}", edges.len());
    let _ = writeln!(out, "time steps:   {}", ds.t_total());
    let _ = writeln!(out, "window:       {}", ds.window);
    let _ = writeln!(out, "samples:      {}", ds.sample_count());
    let _ = writeln!(out, "lambda_max:   {}", ops.lambda_max);
    let isolated = ds.graph.degrees().iter().filter(|&&d| d == 0.0).count();
    let _ = writeln!(out, "isolated:     {isolated}");
    for arch in ArchitectureName::CANONICAL {
        let status = ArchitectureSpec::canonical(arch, ds.window, &SpecOverrides::default())
            .map_or_else(|e| format!("infeasible ({e})"), |_| "feasible".to_owned());
        let _ = writeln!(out, "{:<18}{status}", arch.as_str());
    }
    Ok(EXIT_OK)
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_VALIDATION
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Benchmark(a) => cmd_benchmark(a, out),
        Command::BuildFinanceGraph(a) => cmd_build_finance_graph(a, out),
        Command::MakeSynthetic(a) => cmd_make_synthetic(a, out),
        Command::Inspect(a) => cmd_inspect(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
