//! `zsc` — experiment runner for the zero-shot metric-learning library.
//!
//! Commands: `generate`, `train`, `evaluate`, `sweep`, `gridsearch`,
//! `gradcheck`. Each command accepts `--config <json>` whose keys mirror
//! the flags; explicit flags override the file. The fully resolved
//! configuration is echoed into every output artifact so results are
//! re-derivable from their own metadata.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use zsc_core::data::{generate_synthetic, Dataset, SyntheticSpec};
use zsc_core::error::Error;
use zsc_core::eval::{evaluate, ratio_sweep, sweep_csv};
use zsc_core::gradcheck;
use zsc_core::io::{load_model, save_model};
use zsc_core::mining::Strategy;
use zsc_core::model::Hyperparameters;
use zsc_core::train::{grid_search, train_with_dump, Grid, TrainConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "zsc", version, about = "Zero-shot classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic zero-shot task and write it as a dataset.
    Generate(GenerateArgs),
    /// Train a model on a dataset and write model + learning curve.
    Train(TrainArgs),
    /// Evaluate a saved model on a dataset's test classes.
    Evaluate(EvaluateArgs),
    /// Sweep negative/positive ratios per strategy over several seeds.
    Sweep(SweepArgs),
    /// Grid-search (lambda, mu, m) with a class holdout, then retrain.
    Gridsearch(GridSearchArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(GradCheckArgs),
}

/// A failure carrying its process exit code.
struct CliError {
    code: u8,
    message: String,
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

/// Maps library errors onto the exit-code contract: configuration
/// problems are usage errors, divergence and non-finite values are
/// numerical failures, everything else is a data error.
fn from_core(err: Error) -> CliError {
    fn code(err: &Error) -> u8 {
        match err {
            Error::InvalidConfig(_) | Error::DuplicateSeed(_) => EXIT_USAGE,
            Error::Diverged { .. } | Error::NonFinite { .. } => EXIT_NUMERICAL,
            Error::RunFailed { source, .. } => code(source),
            _ => EXIT_DATA,
        }
    }
    CliError {
        code: code(&err),
        message: err.to_string(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successes; everything else is a usage error
            let code = if e.exit_code() == 0 { 0 } else { EXIT_USAGE };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Gridsearch(args) => cmd_gridsearch(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

/// Reads the optional JSON config file backing a command's flags.
fn load_config_file<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| usage(format!("bad config {}: {e}", p.display())))
        }
    }
}

fn ensure_out_dir(out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| usage(format!("cannot create output dir {}: {e}", out.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|e| CliError {
        code: EXIT_DATA,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

// ---------------------------------------------------------------- generate

#[derive(Args)]
struct GenerateArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the dataset.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Total number of classes.
    #[arg(long)]
    c_total: Option<usize>,
    /// Number of (held-out) test classes.
    #[arg(long)]
    c_test: Option<usize>,
    #[arg(long)]
    images_per_class: Option<usize>,
    /// Feature dimensionality.
    #[arg(long)]
    d: Option<usize>,
    /// Attribute dimensionality.
    #[arg(long)]
    a: Option<usize>,
    /// Std of the Gaussian feature noise.
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Std of the Gaussian per-image attribute noise.
    #[arg(long)]
    attribute_noise_sigma: Option<f64>,
    /// Pairwise correlation of class prototypes (0 = independent).
    #[arg(long)]
    prototype_correlation: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateFile {
    seed: Option<u64>,
    c_total: Option<usize>,
    c_test: Option<usize>,
    images_per_class: Option<usize>,
    d: Option<usize>,
    a: Option<usize>,
    noise_sigma: Option<f64>,
    attribute_noise_sigma: Option<f64>,
    prototype_correlation: Option<f64>,
}

fn cmd_generate(args: GenerateArgs) -> CliResult<()> {
    let file: GenerateFile = load_config_file(args.config.as_deref())?;
    let defaults = SyntheticSpec::default();
    let spec = SyntheticSpec {
        c_total: args.c_total.or(file.c_total).unwrap_or(defaults.c_total),
        c_test: args.c_test.or(file.c_test).unwrap_or(defaults.c_test),
        images_per_class: args
            .images_per_class
            .or(file.images_per_class)
            .unwrap_or(defaults.images_per_class),
        d: args.d.or(file.d).unwrap_or(defaults.d),
        a: args.a.or(file.a).unwrap_or(defaults.a),
        noise_sigma: args.noise_sigma.or(file.noise_sigma).unwrap_or(defaults.noise_sigma),
        attribute_noise_sigma: args
            .attribute_noise_sigma
            .or(file.attribute_noise_sigma)
            .unwrap_or(defaults.attribute_noise_sigma),
        prototype_correlation: args
            .prototype_correlation
            .or(file.prototype_correlation)
            .unwrap_or(defaults.prototype_correlation),
        seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;

    let dataset = generate_synthetic(&spec).map_err(from_core)?;
    ensure_out_dir(&args.out)?;
    let manifest = dataset.save(&args.out).map_err(from_core)?;
    write_json(
        &args.out.join("run_config.json"),
        &serde_json::json!({ "command": "generate", "spec": spec }),
    )?;
    println!(
        "generated {} images ({} classes, {} test) at {}",
        dataset.num_images(),
        dataset.num_classes(),
        spec.c_test,
        manifest.display()
    );
    Ok(())
}

// ------------------------------------------------------------------- train

#[derive(Args, Clone)]
struct TrainArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest path.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.zmodel and curve.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Negative mining strategy: random | uncertainty | unc-cor.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Target |D-| / |D+| ratio.
    #[arg(long)]
    neg_ratio: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Weight of the attribute-prediction loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Weight of the quadratic regularizer.
    #[arg(long)]
    mu: Option<f64>,
    /// Metric-space dimensionality.
    #[arg(long)]
    m: Option<usize>,
    /// Std of the W_A initialization.
    #[arg(long)]
    w_a_init_std: Option<f64>,
    #[arg(long)]
    minibatch_size: Option<usize>,
    /// Write the per-image sampling distributions of the first
    /// strategy-driven epoch to this CSV file.
    #[arg(long)]
    dump_distributions: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    seed: Option<u64>,
    strategy: Option<Strategy>,
    neg_ratio: Option<usize>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    lambda: Option<f64>,
    mu: Option<f64>,
    m: Option<usize>,
    w_a_init_std: Option<f64>,
    minibatch_size: Option<usize>,
}

fn resolve_train_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let file: TrainFile = load_config_file(args.config.as_deref())?;
    let hp_defaults = Hyperparameters::default();
    let config_defaults = TrainConfig::default();
    let config = TrainConfig {
        hp: Hyperparameters {
            lambda: args.lambda.or(file.lambda).unwrap_or(hp_defaults.lambda),
            mu: args.mu.or(file.mu).unwrap_or(hp_defaults.mu),
            m: args.m.or(file.m).unwrap_or(hp_defaults.m),
            learning_rate: args
                .learning_rate
                .or(file.learning_rate)
                .unwrap_or(hp_defaults.learning_rate),
            epochs: args.epochs.or(file.epochs).unwrap_or(hp_defaults.epochs),
            w_a_init_std: args
                .w_a_init_std
                .or(file.w_a_init_std)
                .unwrap_or(hp_defaults.w_a_init_std),
            neg_ratio: args.neg_ratio.or(file.neg_ratio).unwrap_or(hp_defaults.neg_ratio),
            seed: args.seed.or(file.seed).unwrap_or(hp_defaults.seed),
        },
        strategy: args.strategy.or(file.strategy).unwrap_or(config_defaults.strategy),
        minibatch_size: args
            .minibatch_size
            .or(file.minibatch_size)
            .unwrap_or(config_defaults.minibatch_size),
        curve_sample_period: 1,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let config = resolve_train_config(&args)?;
    let dataset = Dataset::load(&args.data).map_err(from_core)?;
    ensure_out_dir(&args.out)?;

    let (params, curve) =
        train_with_dump(&dataset, &config, args.dump_distributions.as_deref()).map_err(from_core)?;

    let model_path = args.out.join("model.zmodel");
    save_model(&model_path, &params).map_err(from_core)?;
    let echo = serde_json::json!({
        "command": "train",
        "data": args.data.display().to_string(),
        "config": config,
    });
    curve
        .write_csv(&args.out.join("curve.csv"), &echo)
        .map_err(from_core)?;
    write_json(&args.out.join("run_config.json"), &echo)?;
    println!(
        "trained {} epochs (strategy {}, |D-| cap {}x) -> {}",
        config.hp.epochs,
        config.strategy,
        config.hp.neg_ratio,
        model_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset manifest path.
    #[arg(long)]
    data: PathBuf,
    /// Saved model file.
    #[arg(long)]
    model: PathBuf,
    /// Optional output directory for report.json (also printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_evaluate(args: EvaluateArgs) -> CliResult<()> {
    let dataset = Dataset::load(&args.data).map_err(from_core)?;
    let model = load_model(&args.model).map_err(from_core)?;
    if model.feature_dim() != dataset.feature_dim() {
        return Err(from_core(Error::dim(
            "model feature dim vs dataset",
            model.feature_dim(),
            dataset.feature_dim(),
        )));
    }
    if model.attribute_dim() != dataset.attribute_dim() {
        return Err(from_core(Error::dim(
            "model attribute dim vs dataset",
            model.attribute_dim(),
            dataset.attribute_dim(),
        )));
    }
    let echo = serde_json::json!({
        "command": "evaluate",
        "data": args.data.display().to_string(),
        "model": args.model.display().to_string(),
    });
    let report = evaluate(&model, &dataset, echo).map_err(from_core)?;
    let value = serde_json::to_value(&report).expect("serializable");
    println!("{}", serde_json::to_string_pretty(&value).expect("serializable"));
    if let Some(out) = &args.out {
        ensure_out_dir(out)?;
        write_json(&out.join("report.json"), &value)?;
    }
    Ok(())
}

// ------------------------------------------------------------------- sweep

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Comma-separated neg/pos ratios, e.g. 1,10,50,100.
    #[arg(long, value_delimiter = ',', default_value = "1,10")]
    ratios: Vec<usize>,
    /// Comma-separated strategies (default: all three).
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<Strategy>>,
    /// Comma-separated seeds, one training run per seed and cell.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
}

fn cmd_sweep(args: SweepArgs) -> CliResult<()> {
    let config = resolve_train_config(&args.train)?;
    let dataset = Dataset::load(&args.train.data).map_err(from_core)?;
    let strategies = args.strategies.unwrap_or_else(|| Strategy::ALL.to_vec());
    if args.ratios.is_empty() || strategies.is_empty() || args.seeds.is_empty() {
        return Err(usage("sweep needs at least one ratio, strategy and seed"));
    }
    ensure_out_dir(&args.train.out)?;

    let cells =
        ratio_sweep(&dataset, &config, &strategies, &args.ratios, &args.seeds).map_err(from_core)?;
    let csv = sweep_csv(&cells);
    let csv_path = args.train.out.join("sweep.csv");
    std::fs::write(&csv_path, &csv).map_err(|e| CliError {
        code: EXIT_DATA,
        message: format!("cannot write {}: {e}", csv_path.display()),
    })?;
    let echo = serde_json::json!({
        "command": "sweep",
        "data": args.train.data.display().to_string(),
        "config": config,
        "ratios": args.ratios,
        "strategies": strategies,
        "seeds": args.seeds,
        "cells": cells,
    });
    write_json(&args.train.out.join("sweep.json"), &echo)?;
    print!("{csv}");
    Ok(())
}

// -------------------------------------------------------------- gridsearch

#[derive(Args)]
struct GridSearchArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Candidate lambda values.
    #[arg(long, value_delimiter = ',', default_value = "0.1,1.0")]
    lambdas: Vec<f64>,
    /// Candidate mu values.
    #[arg(long, value_delimiter = ',', default_value = "0.0001,0.01")]
    mus: Vec<f64>,
    /// Candidate metric dimensionalities.
    #[arg(long, value_delimiter = ',', default_value = "16")]
    ms: Vec<usize>,
}

fn cmd_gridsearch(args: GridSearchArgs) -> CliResult<()> {
    let config = resolve_train_config(&args.train)?;
    let dataset = Dataset::load(&args.train.data).map_err(from_core)?;
    let grid = Grid {
        lambdas: args.lambdas,
        mus: args.mus,
        ms: args.ms,
    };
    ensure_out_dir(&args.train.out)?;

    let (best_hp, params, curve) = grid_search(&dataset, &grid, &config).map_err(from_core)?;
    let model_path = args.train.out.join("model.zmodel");
    save_model(&model_path, &params).map_err(from_core)?;
    let echo = serde_json::json!({
        "command": "gridsearch",
        "data": args.train.data.display().to_string(),
        "base_config": config,
        "grid": grid,
        "best": best_hp,
    });
    curve
        .write_csv(&args.train.out.join("curve.csv"), &echo)
        .map_err(from_core)?;
    write_json(&args.train.out.join("run_config.json"), &echo)?;
    println!(
        "best grid point: lambda={} mu={} m={} -> {}",
        best_hp.lambda,
        best_hp.mu,
        best_hp.m,
        model_path.display()
    );
    Ok(())
}

// --------------------------------------------------------------- gradcheck

#[derive(Args)]
struct GradCheckArgs {
    /// Number of random instances to check.
    #[arg(long, default_value_t = 100)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = gradcheck::DEFAULT_STEP)]
    step: f64,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Optional output directory for gradcheck.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_gradcheck(args: GradCheckArgs) -> CliResult<()> {
    if args.points == 0 {
        return Err(usage("--points must be >= 1"));
    }
    let report = gradcheck::run(args.points, args.seed, args.step, args.tolerance)
        .map_err(from_core)?;
    let value = serde_json::json!({
        "command": "gradcheck",
        "seed": args.seed,
        "report": report,
    });
    println!("{}", serde_json::to_string_pretty(&value).expect("serializable"));
    if let Some(out) = &args.out {
        ensure_out_dir(out)?;
        write_json(&out.join("gradcheck.json"), &value)?;
    }
    if !report.passed {
        return Err(CliError {
            code: EXIT_NUMERICAL,
            message: format!(
                "gradient check failed: max relative error {} > tolerance {}",
                report.max_relative_error, report.tolerance
            ),
        });
    }
    Ok(())
}
