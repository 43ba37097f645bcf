//! `fttn`: train, evaluate, anneal and benchmark the temperature-layer MPS
//! classifier from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 data
//! error. Data is loaded before anything is written, so a data error leaves
//! no partial outputs behind.

mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use fttn::anneal::{anneal_beta, AnnealConfig, AnnealError, ProxyObjective, TraceRow};
use fttn::contraction::{absorb_features, contract};
use fttn::training::{evaluate_detailed, train, EpochMetrics, TrainConfig};
use fttn::{
    count_flops, effective_sites, embed_pixels, ContractionOrder, Dataset, ModelShape, MpsClassifier,
    ScaledVector,
};
use rand::Rng;

use crate::config::{Objective, RunConfig, Split};

#[derive(Parser)]
#[command(name = "fttn", version, about = "Finite-temperature MPS image classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, model.fttn and config.echo.
    Train(TrainArgs),
    /// Evaluate a checkpoint; prints accuracy and writes confusion.csv.
    Eval(EvalArgs),
    /// Search beta by simulated annealing; writes trace.csv.
    Anneal(AnnealArgs),
    /// Time both contraction orders; writes bench.csv.
    Bench(BenchArgs),
}

/// Flags accepted by every subcommand. Values are applied after the config
/// file, so flags win.
#[derive(Args)]
struct Shared {
    /// `key = value` config file applied over the defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<String>,
    /// Bond dimension.
    #[arg(long)]
    chi: Option<String>,
    /// Temperature-layer strength.
    #[arg(long)]
    beta: Option<String>,
    /// Use the bare chain without the temperature layer.
    #[arg(long)]
    baseline: bool,
    #[arg(long, value_parser = ["linear", "trig"])]
    feature_map: Option<String>,
    /// Side length images are average-pooled to.
    #[arg(long, value_parser = ["14", "28"])]
    downscale: Option<String>,
    /// Site carrying the label axis (default: middle of the chain).
    #[arg(long)]
    label_site: Option<String>,
    /// Directory holding the four standard IDX files.
    #[arg(long, value_name = "DIR")]
    data: Option<String>,
    /// Any other config key, e.g. `--set noise_scale=0.02`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    max_train: Option<String>,
    #[arg(long)]
    max_test: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<String>,
    /// Which configured dataset to evaluate on.
    #[arg(long, value_parser = ["train", "test"])]
    split: Option<String>,
    #[arg(long)]
    max_train: Option<String>,
    #[arg(long)]
    max_test: Option<String>,
}

#[derive(Args)]
struct AnnealArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long, value_parser = ["synthetic", "accuracy"])]
    objective: Option<String>,
    #[arg(long)]
    iterations: Option<String>,
    #[arg(long)]
    beta_init: Option<String>,
    #[arg(long)]
    step_width: Option<String>,
    #[arg(long)]
    proxy_epochs: Option<String>,
    #[arg(long)]
    proxy_subset: Option<String>,
    #[arg(long)]
    max_train: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    shared: Shared,
    /// Comma-separated chain lengths.
    #[arg(long, value_name = "N,N,...")]
    sizes: Option<String>,
    #[arg(long)]
    repeats: Option<String>,
}

enum CliError {
    Config(String),
    Data(String),
    Run(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Run(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Run(m) => m,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Run(format!("{}: {e}", path.display()))
}

/// Defaults, then the config file, then the flags in `overrides`.
fn resolve(shared: &Shared, overrides: Vec<(&str, &Option<String>)>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &shared.config {
        cfg.apply_file(path).map_err(CliError::Config)?;
    }
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (key, value) in [
        ("seed", &shared.seed),
        ("out", &shared.out),
        ("threads", &shared.threads),
        ("chi", &shared.chi),
        ("beta", &shared.beta),
        ("feature_map", &shared.feature_map),
        ("downscale", &shared.downscale),
        ("label_site", &shared.label_site),
        ("data", &shared.data),
    ]
    .into_iter()
    .chain(overrides)
    {
        if let Some(v) = value {
            pairs.push((key.to_string(), v.clone()));
        }
    }
    if shared.baseline {
        pairs.push(("baseline".into(), "true".into()));
    }
    for kv in &shared.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        pairs.push((k.trim().to_string(), v.to_string()));
    }
    for (k, v) in pairs {
        cfg.set(&k, &v).map_err(CliError::Config)?;
    }
    cfg.validate().map_err(CliError::Config)?;
    Ok(cfg)
}

fn setup_threads(cfg: &RunConfig) -> CliResult<()> {
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(run_err)?;
    }
    Ok(())
}

fn load_dataset(images: &Option<PathBuf>, labels: &Option<PathBuf>, max: usize, cfg: &RunConfig, what: &str) -> CliResult<Dataset> {
    let (Some(images), Some(labels)) = (images, labels) else {
        return Err(CliError::Config(format!(
            "no {what} data configured (use --data DIR or the {what}_images / {what}_labels keys)"
        )));
    };
    let data = Dataset::from_idx(images, labels, cfg.classes).map_err(|e| CliError::Data(e.to_string()))?;
    let data = if max > 0 { data.take(max) } else { data };
    if data.is_empty() {
        return Err(CliError::Data(format!("{what} dataset {} is empty", images.display())));
    }
    if cfg.downscale != data.height() {
        return data.downscale(cfg.downscale).map_err(|e| CliError::Data(e.to_string()));
    }
    Ok(data)
}

fn model_shape(cfg: &RunConfig, n_sites: usize) -> CliResult<ModelShape> {
    let label_site = cfg.label_site.unwrap_or(n_sites / 2);
    ModelShape::with_label_site(n_sites, cfg.chi, cfg.classes, label_site).map_err(|e| CliError::Config(e.to_string()))
}

fn prepare_out(cfg: &RunConfig, command: &str) -> CliResult<()> {
    fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    let path = cfg.out.join("config.echo");
    fs::write(&path, cfg.echo(command)).map_err(io_err(&path))
}

fn train_config(cfg: &RunConfig) -> CliResult<TrainConfig> {
    let config = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        adam: cfg.adam(),
        temperature: cfg.temperature().map_err(CliError::Config)?,
        seed: cfg.seed,
        reduction: cfg.reduction,
        clip: cfg.clip,
        feature_map: cfg.feature_map,
    };
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(config)
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let cfg = resolve(
        &args.shared,
        vec![
            ("epochs", &args.epochs),
            ("batch_size", &args.batch_size),
            ("learning_rate", &args.lr),
            ("max_train", &args.max_train),
            ("max_test", &args.max_test),
        ],
    )?;
    let config = train_config(&cfg)?;
    setup_threads(&cfg)?;
    let train_set = load_dataset(&cfg.train_images, &cfg.train_labels, cfg.max_train, &cfg, "train")?;
    let test_set = match (&cfg.test_images, &cfg.test_labels) {
        (Some(_), Some(_)) => Some(load_dataset(&cfg.test_images, &cfg.test_labels, cfg.max_test, &cfg, "test")?),
        _ => None,
    };
    if let Some(test) = &test_set {
        if test.pixels_per_image() != train_set.pixels_per_image() {
            return Err(CliError::Data("train and test images differ in size".into()));
        }
    }
    let shape = model_shape(&cfg, train_set.pixels_per_image())?;
    let mut model = MpsClassifier::init(shape, cfg.seed, cfg.noise_scale).map_err(run_err)?;

    prepare_out(&cfg, "train")?;
    let metrics_path = cfg.out.join("metrics.csv");
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(io_err(&metrics_path))?);
    writeln!(metrics, "{}", EpochMetrics::CSV_HEADER).map_err(io_err(&metrics_path))?;
    eprintln!(
        "training {} samples ({}x{} images, downscale {}), chi {}, {} epochs, beta {}",
        train_set.len(),
        train_set.height(),
        train_set.width(),
        cfg.downscale,
        cfg.chi,
        cfg.epochs,
        if cfg.baseline { "off".to_string() } else { cfg.beta.to_string() }
    );
    let mut write_error = None;
    let result = train(&mut model, &train_set, test_set.as_ref(), &config, |row| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  train {:.4}  test {}",
            row.epoch,
            row.train_loss,
            row.train_acc,
            row.test_acc.map_or("-".into(), |a| format!("{a:.4}"))
        );
        if let Err(e) = writeln!(metrics, "{}", row.csv_row()).and_then(|_| metrics.flush()) {
            write_error.get_or_insert(e);
        }
    });
    if let Some(e) = write_error {
        return Err(io_err(&metrics_path)(e));
    }
    result.map_err(run_err)?;
    let model_path = cfg.out.join("model.fttn");
    fttn::save_checkpoint(&model, &model_path).map_err(run_err)?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let cfg = resolve(
        &args.shared,
        vec![
            ("checkpoint", &args.checkpoint),
            ("split", &args.split),
            ("max_train", &args.max_train),
            ("max_test", &args.max_test),
        ],
    )?;
    let temperature = cfg.temperature().map_err(CliError::Config)?;
    setup_threads(&cfg)?;
    let checkpoint = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Config("no checkpoint given (--checkpoint PATH)".into()))?;
    let model = fttn::load_checkpoint(&checkpoint).map_err(|e| CliError::Data(e.to_string()))?;
    let data = match cfg.split {
        Split::Train => load_dataset(&cfg.train_images, &cfg.train_labels, cfg.max_train, &cfg, "train")?,
        Split::Test => load_dataset(&cfg.test_images, &cfg.test_labels, cfg.max_test, &cfg, "test")?,
    };
    if data.pixels_per_image() != model.n_sites() || data.num_classes() != model.num_classes() {
        return Err(CliError::Data(format!(
            "dataset has {} pixels and {} classes, checkpoint expects {} and {}",
            data.pixels_per_image(),
            data.num_classes(),
            model.n_sites(),
            model.num_classes()
        )));
    }
    let eval = evaluate_detailed(&model, &data, temperature.as_ref(), cfg.feature_map).map_err(run_err)?;

    prepare_out(&cfg, "eval")?;
    let path = cfg.out.join("confusion.csv");
    let classes = model.num_classes();
    let mut out = String::from("true_class");
    for c in 0..classes {
        out.push_str(&format!(",pred_{c}"));
    }
    out.push('\n');
    for (truth, row) in eval.confusion.iter().enumerate() {
        out.push_str(&truth.to_string());
        for count in row {
            out.push_str(&format!(",{count}"));
        }
        out.push('\n');
    }
    fs::write(&path, out).map_err(io_err(&path))?;
    println!("accuracy={} mean_loss={} samples={}", eval.accuracy, eval.mean_loss, data.len());
    Ok(())
}

fn write_trace(path: &Path, trace: &[TraceRow]) -> CliResult<()> {
    let mut out = format!("{}\n", TraceRow::CSV_HEADER);
    for row in trace {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

fn cmd_anneal(args: AnnealArgs) -> CliResult<()> {
    let cfg = resolve(
        &args.shared,
        vec![
            ("objective", &args.objective),
            ("iterations", &args.iterations),
            ("beta_init", &args.beta_init),
            ("step_width", &args.step_width),
            ("proxy_epochs", &args.proxy_epochs),
            ("proxy_subset", &args.proxy_subset),
            ("max_train", &args.max_train),
        ],
    )?;
    let anneal = AnnealConfig {
        beta_init: cfg.beta_init,
        step_width: cfg.step_width,
        anneal_temp_init: cfg.anneal_temp,
        cooling_rate: cfg.cooling_rate,
        iterations: cfg.iterations,
        seed: cfg.seed,
        proxy_epochs: cfg.proxy_epochs,
        proxy_subset: cfg.proxy_subset,
    };
    anneal.validate().map_err(|e| CliError::Config(e.to_string()))?;
    setup_threads(&cfg)?;

    let outcome = match cfg.objective {
        Objective::Synthetic => {
            prepare_out(&cfg, "anneal")?;
            anneal_beta(|b| Ok(-(b - 0.4) * (b - 0.4)), &anneal)
        }
        Objective::Accuracy => {
            if cfg.baseline {
                return Err(CliError::Config("annealing beta needs the temperature layer; drop --baseline".into()));
            }
            let train_config = train_config(&cfg)?;
            let data = load_dataset(&cfg.train_images, &cfg.train_labels, cfg.max_train, &cfg, "train")?;
            let shape = model_shape(&cfg, data.pixels_per_image())?;
            let template = MpsClassifier::init(shape, cfg.seed, cfg.noise_scale).map_err(run_err)?;
            let objective = ProxyObjective::new(&data, template, &train_config, &anneal, cfg.holdout)
                .map_err(|e| CliError::Data(e.to_string()))?;
            prepare_out(&cfg, "anneal")?;
            anneal_beta(
                |b| {
                    let score = objective.score(b);
                    if let Ok(s) = &score {
                        eprintln!("beta {b:.4}  validation accuracy {s:.4}");
                    }
                    score
                },
                &anneal,
            )
        }
    };
    let trace_path = cfg.out.join("trace.csv");
    match outcome {
        Ok(outcome) => {
            write_trace(&trace_path, &outcome.trace)?;
            let summary = cfg.out.join("summary.csv");
            fs::write(
                &summary,
                format!(
                    "beta_star,best_score,initial_score,iterations\n{},{},{},{}\n",
                    outcome.beta_star,
                    outcome.best_score,
                    outcome.initial_score,
                    outcome.trace.len()
                ),
            )
            .map_err(io_err(&summary))?;
            println!("beta_star={} best_score={}", outcome.beta_star, outcome.best_score);
            Ok(())
        }
        Err(AnnealError::NonFinite { iter, beta, score, trace }) => {
            write_trace(&trace_path, &trace)?;
            Err(CliError::Run(format!(
                "objective returned {score} at beta = {beta} (iteration {iter}); trace so far in {}",
                trace_path.display()
            )))
        }
        Err(AnnealError::Objective(e)) => Err(run_err(e)),
    }
}

/// Largest entry gap between two score vectors after aligning their exponents.
fn relative_gap(a: &ScaledVector, b: &ScaledVector) -> f64 {
    let factor = 2f64.powi((b.exponent() - a.exponent()) as i32);
    let scale = a.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    a.values
        .iter()
        .zip(&b.values)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y * factor).abs()))
        / scale
}

fn cmd_bench(args: BenchArgs) -> CliResult<()> {
    let cfg = resolve(&args.shared, vec![("bench_sizes", &args.sizes), ("bench_repeats", &args.repeats)])?;
    let beta = if cfg.baseline { 0.0 } else { cfg.beta };
    setup_threads(&cfg)?;
    prepare_out(&cfg, "bench")?;

    let mut csv = String::from("order,n_sites,chi,flops,wall_time_ns\n");
    for &n in &cfg.bench_sizes {
        let shape = model_shape(&cfg, n)?;
        let model = MpsClassifier::init(shape, cfg.seed, cfg.noise_scale).map_err(run_err)?;
        let mut rng = fttn::rng::indexed_stream(cfg.seed, "bench-image", n as u64);
        let pixels: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let image = embed_pixels(&pixels, cfg.feature_map).map_err(run_err)?;
        let effective = effective_sites(&model, beta).map_err(run_err)?;

        let mut scores = Vec::new();
        for order in [ContractionOrder::Sequential, ContractionOrder::ParallelTree] {
            let mut best = u128::MAX;
            let mut result = None;
            for _ in 0..cfg.bench_repeats {
                let start = Instant::now();
                let chain = absorb_features(&shape, &effective, &image).map_err(run_err)?;
                let out = contract(&chain, order).map_err(run_err)?;
                best = best.min(start.elapsed().as_nanos());
                result = Some(out);
            }
            let flops = count_flops(n, cfg.chi, fttn::LOCAL_DIM, cfg.classes, order).map_err(run_err)?;
            csv.push_str(&format!("{},{n},{},{},{best}\n", order.name(), cfg.chi, flops.total()));
            scores.push(result.expect("at least one repeat"));
        }
        let gap = relative_gap(&scores[0], &scores[1]);
        if !(gap <= 1e-10) {
            return Err(CliError::Run(format!(
                "orders disagree at N = {n}: relative gap {gap:e}"
            )));
        }
        eprintln!("N = {n:>5}: orders agree to {gap:.1e}");
    }
    let path = cfg.out.join("bench.csv");
    fs::write(&path, csv).map_err(io_err(&path))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Anneal(a) => cmd_anneal(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e {
                CliError::Config(_) => "configuration error",
                CliError::Data(_) => "data error",
                CliError::Run(_) => "error",
            };
            eprintln!("fttn: {kind}: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
