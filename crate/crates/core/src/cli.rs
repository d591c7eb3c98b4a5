//! Command-line entry point: `train`, `eval`, `gradcheck`, `gen-multimnist`.
//!
//! Config precedence (lowest first): dataset preset, `--config` file,
//! trailing `--key=value` overrides. For `eval` the checkpoint's stored config
//! sits below the file.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{parse_overrides, parse_pairs, read_pairs, resolve, to_text, Pairs};
use crate::data::{
    load_cifar10_split, load_mnist_split, make_multimnist, write_multimnist, DatasetSplit, Source,
    SplitName,
};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, Component, Precision};
use crate::rng::SeedStream;
use crate::train::{evaluate, model_for, train, TrainConfig, TrainOutcome, TrainState, CSV_HEADER};

pub const DATA_DIR_ENV: &str = "CAPSROUTE_DATA_DIR";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.cfg";
pub const MODEL_FILE: &str = "model.ckpt";

#[derive(Debug, Parser)]
#[command(
    name = "capsroute",
    version,
    about = "Capsule networks with learned routing coefficients"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes metrics.csv, config.cfg and model.ckpt into --out.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print `eval_error_pct=<x>`.
    Eval(EvalArgs),
    /// Finite-difference check of every backward pass on a tiny network.
    Gradcheck(GradcheckArgs),
    /// Write MultiMNIST composites as IDX files.
    GenMultimnist(GenArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults to $CAPSROUTE_DATA_DIR, then ./data.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value = "runs/latest")]
    pub out: PathBuf,
    /// Config overrides such as --routing.mode=l1 --recon=off
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "--KEY=VALUE"
    )]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: SplitName,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "--KEY=VALUE"
    )]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// First seed of the range.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Analytic gradients in f64 (threshold 1e-6) instead of f32 (1e-4).
    #[arg(long)]
    pub f64: bool,
    /// Inject a fault into one component's backward pass.
    #[arg(long, value_name = "COMPONENT")]
    pub corrupt: Option<Component>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// MNIST split the digits are drawn from.
    #[arg(long, default_value = "train")]
    pub split: SplitName,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn data_dir(arg: Option<PathBuf>) -> PathBuf {
    arg.or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// `<dir>/<name>` when that directory exists, else `dir` itself.
fn dataset_dir(dir: &Path, name: &str) -> PathBuf {
    let sub = dir.join(name);
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

pub fn load_split(cfg: &TrainConfig, dir: &Path, name: SplitName) -> Result<DatasetSplit> {
    let split = match cfg.dataset {
        Source::Mnist => load_mnist_split(&dataset_dir(dir, "mnist"), name, Source::Mnist)?,
        Source::Fashion => load_mnist_split(&dataset_dir(dir, "fashion"), name, Source::Fashion)?,
        Source::Cifar10 => load_cifar10_split(&dataset_dir(dir, "cifar10"), name)?,
        Source::MultiMnist => {
            let base = load_mnist_split(&dataset_dir(dir, "mnist"), name, Source::Mnist)?;
            let (count, label) = match name {
                SplitName::Train => (cfg.multi_train, "multimnist.train"),
                SplitName::Test => (cfg.multi_test, "multimnist.test"),
            };
            let seed = SeedStream::new(cfg.seed).split(label).seed();
            make_multimnist(&base, count, seed)?
        }
    };
    let limit = match name {
        SplitName::Train => cfg.train_limit,
        SplitName::Test => cfg.test_limit,
    };
    match limit {
        Some(n) => split.truncate(n),
        None => Ok(split),
    }
}

fn resolve_layers(layers: &[Pairs]) -> Result<TrainConfig> {
    let all: Pairs = layers.iter().flatten().cloned().collect();
    resolve(&all)
}

fn snapshot(state: &TrainState, cfg: &TrainConfig) -> Checkpoint<f32> {
    Checkpoint::from_params(to_text(cfg), &state.params)
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut layers = Vec::new();
    if let Some(path) = &args.config {
        layers.push(read_pairs(path)?);
    }
    layers.push(parse_overrides(&args.overrides)?);
    let cfg = resolve_layers(&layers)?;
    let outcome = train_to_dir(&cfg, &data_dir(args.data_dir), &args.out)?;
    if let Some(last) = outcome.rows.last() {
        println!("eval_error_pct={:.4}", last.eval_error_pct);
    }
    Ok(())
}

/// Loads data, trains, and writes the config snapshot, metrics CSV,
/// interval checkpoints and the final `model.ckpt` into `out`.
pub fn train_to_dir(cfg: &TrainConfig, data_dir: &Path, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let resolved = to_text(cfg);
    eprintln!("resolved config:\n{resolved}");

    let train_split = load_split(cfg, data_dir, SplitName::Train)?;
    let test_split = load_split(cfg, data_dir, SplitName::Test)?;
    eprintln!(
        "train {} / test {} images from {}",
        train_split.len(),
        test_split.len(),
        data_dir.display()
    );

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_path = out.join(CONFIG_FILE);
    fs::write(&config_path, &resolved).map_err(|e| Error::io(&config_path, e))?;
    let metrics_path = out.join(METRICS_FILE);
    let mut metrics =
        BufWriter::new(File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?);
    writeln!(metrics, "{CSV_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;

    let outcome = train(
        cfg,
        &train_split,
        &test_split,
        |row| {
            eprintln!("{}", row.csv());
            writeln!(metrics, "{}", row.csv())
                .and_then(|_| metrics.flush())
                .map_err(|e| Error::io(&metrics_path, e))
        },
        |state| {
            let path = out.join(format!("checkpoint-{}.ckpt", state.iteration));
            snapshot(state, cfg).save(&path)
        },
    )?;
    snapshot(&outcome.state, cfg).save(&out.join(MODEL_FILE))?;
    Ok(outcome)
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::<f32>::load(&args.checkpoint)?;
    let mut layers = vec![parse_pairs(
        &ck.config_text,
        &args.checkpoint.display().to_string(),
    )?];
    if let Some(path) = &args.config {
        layers.push(read_pairs(path)?);
    }
    layers.push(parse_overrides(&args.overrides)?);
    let cfg = resolve_layers(&layers)?;
    cfg.validate()?;
    let split = load_split(&cfg, &data_dir(args.data_dir), args.split)?;
    let model = model_for(&cfg, &split);
    model.validate()?;
    let params = ck.into_params(&model, cfg.routing.mode.uses_coefficients())?;
    let err = evaluate(&params, &model, &cfg.routing, &split, cfg.eval_batch)?;
    println!("eval_error_pct={err:.4}");
    Ok(())
}

pub fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    if args.seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()));
    }
    let precision = if args.f64 {
        Precision::F64
    } else {
        Precision::F32
    };
    let seeds = args.seed..args.seed + args.seeds;
    let reports = run_suite(seeds, precision, args.corrupt)?;
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<22} max_rel_err={:.3e} threshold={:.0e} {verdict}",
            r.component.name(),
            r.max_error,
            r.threshold
        );
        if !r.passed() {
            failed.push(r.component.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradientCheck(failed.join(", ")))
    }
}

pub fn cmd_gen_multimnist(args: GenArgs) -> Result<()> {
    if args.count == 0 {
        return Err(Error::Config("--count must be >= 1".into()));
    }
    let dir = data_dir(args.data_dir);
    let base = load_mnist_split(&dataset_dir(&dir, "mnist"), args.split, Source::Mnist)?;
    let split = make_multimnist(&base, args.count, args.seed)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let prefix = match args.split {
        SplitName::Train => "train",
        SplitName::Test => "t10k",
    };
    write_multimnist(&split, &args.out, prefix)?;
    eprintln!("wrote {} composites to {}", split.len(), args.out.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::GenMultimnist(a) => cmd_gen_multimnist(a),
    }
}
