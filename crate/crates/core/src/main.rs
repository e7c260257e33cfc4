use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use contrastive_age::config::{load_synth_config, load_train_config};
use contrastive_age::dataset::LabeledDataset;
use contrastive_age::manifest::{digest_file, Artifacts, FileDigest, RunManifest};
use contrastive_age::model::Model;
use contrastive_age::protocol::{cross_validate, evaluate_checkpoint, Protocol};
use contrastive_age::selfcheck::{self, SelfCheckOptions};
use contrastive_age::sweep::{grid_cells, loss_set_cells, sweep, SweepGrid};
use contrastive_age::synth::generate_dataset;
use contrastive_age::train::{train, TrainConfig};
use contrastive_age::{Error, Result};

#[derive(Parser)]
#[command(
    name = "contrastive-age",
    version,
    about = "Identity-aware contrastive age estimation on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Gen(GenArgs),
    /// Train one model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint, or train and evaluate per fold, under a protocol.
    Eval(EvalArgs),
    /// Train and evaluate a grid of loss weights or the loss-set ablation.
    Sweep(SweepArgs),
    /// Run the gradient, sampler and split verification suites.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Synthetic-data config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Existing output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Training config file plus flag overrides.
#[derive(Args)]
struct TrainOverrides {
    /// Training config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    lambda_t: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl TrainOverrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = load_train_config(self.config.as_deref())?;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.lambda_c {
            cfg.lambda_c = v;
        }
        if let Some(v) = self.lambda_t {
            cfg.lambda_t = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    train: TrainOverrides,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProtocolArgs {
    #[arg(long, default_value = "se")]
    protocol: Protocol,
    /// Number of folds for rs and se.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Folds trained in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Evaluate this model on every test fold instead of training per fold.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOverrides,
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    train: TrainOverrides,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Grid file (TOML) with `lambda_c`, `lambda_t` and optional `loss_sets`.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Comma-separated λ_c values.
    #[arg(long, value_delimiter = ',')]
    lambda_c_grid: Vec<f64>,
    /// Comma-separated λ_t values.
    #[arg(long, value_delimiter = ',')]
    lambda_t_grid: Vec<f64>,
    /// The six loss-combination rows at the base λ_c and λ_t.
    #[arg(long)]
    loss_sets: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Random points per gradient case.
    #[arg(long, default_value_t = 100)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt the analytic gradient of the named case.
    #[arg(long)]
    inject_fault: Option<String>,
}

fn to_json<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("config serializes")
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

fn manifest(
    command: &str,
    config: serde_json::Value,
    seeds: &[(&str, u64)],
    inputs: Vec<FileDigest>,
    start: Instant,
) -> RunManifest {
    RunManifest {
        command: command.into(),
        config,
        seeds: seeds
            .iter()
            .map(|&(k, v)| (k.to_string(), v))
            .collect::<BTreeMap<_, _>>(),
        inputs,
        out_dir: String::new(),
        outputs: Vec::new(),
        duration_secs: start.elapsed().as_secs_f64(),
    }
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "output directory does not exist",
            ),
        })
    }
}

/// Dataset CSV, its sidecar when present, and the config file when given.
fn input_digests(dataset: &Path, extra: &[Option<&Path>]) -> Result<Vec<FileDigest>> {
    let mut inputs = vec![digest_file(dataset)?];
    let meta = LabeledDataset::meta_path(dataset);
    if meta.exists() {
        inputs.push(digest_file(&meta)?);
    }
    for p in extra.iter().flatten() {
        inputs.push(digest_file(p)?);
    }
    Ok(inputs)
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let start = Instant::now();
    ensure_out_dir(&args.out)?;
    let cfg = load_synth_config(args.config.as_deref())?;
    let (ds, truth) = generate_dataset(&cfg, args.seed)?;
    let mut files = Artifacts::new();
    files.add("dataset.csv", ds.to_csv_string());
    files.add("dataset.meta.json", ds.meta_json());
    files.add("ground_truth.csv", truth.to_csv_string());
    let inputs = args
        .config
        .as_deref()
        .map(digest_file)
        .transpose()?
        .into_iter()
        .collect();
    let m = manifest("gen", to_json(&cfg), &[("data", args.seed)], inputs, start);
    files.commit(&args.out, m)?;
    println!(
        "generated {} samples of {} identities in {}",
        ds.len(),
        ds.num_identities(),
        args.out.display()
    );
    Ok(())
}

fn epoch_log_csv(history: &[contrastive_age::train::EpochRecord]) -> String {
    let mut out = String::from("epoch,l_s,l_m,l_v,l_c,l_t,total\n");
    for r in history {
        let l = &r.loss;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, l.l_s, l.l_m, l.l_v, l.l_c, l.l_t, l.total
        ));
    }
    out
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let start = Instant::now();
    ensure_out_dir(&args.out)?;
    let cfg = args.train.resolve()?;
    let ds = LabeledDataset::read_csv(&args.dataset)?;
    let outcome = train(&ds, &cfg)?;
    let mut files = Artifacts::new();
    files.add("checkpoint.json", outcome.model.to_checkpoint_string());
    let jsonl: String = outcome
        .history
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect();
    files.add("train_log.jsonl", jsonl);
    files.add("train_log.csv", epoch_log_csv(&outcome.history));
    let inputs = input_digests(&args.dataset, &[args.train.config.as_deref()])?;
    let m = manifest(
        "train",
        to_json(&cfg),
        &[("train", cfg.seed)],
        inputs,
        start,
    );
    files.commit(&args.out, m)?;
    if let Some(last) = outcome.history.last() {
        println!("epoch {} total loss {:.6}", last.epoch, last.loss.total);
    }
    println!(
        "checkpoint written to {}",
        args.out.join("checkpoint.json").display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let start = Instant::now();
    ensure_out_dir(&args.out)?;
    let cfg = args.train.resolve()?;
    let ds = LabeledDataset::read_csv(&args.dataset)?;
    let p = &args.protocol;
    let report = match &args.checkpoint {
        Some(path) => {
            let model = Model::load(path)?;
            let mc = model.config();
            if mc.input_dim != ds.input_dim() || mc.num_ages != ds.num_ages() {
                return Err(Error::Config(format!(
                    "checkpoint expects input_dim {} and {} ages, dataset has {} and {}",
                    mc.input_dim,
                    mc.num_ages,
                    ds.input_dim(),
                    ds.num_ages()
                )));
            }
            evaluate_checkpoint(&model, &ds, p.protocol, p.k, cfg.seed, cfg.prediction)?
        }
        None => cross_validate(&ds, &cfg, p.protocol, p.k, cfg.seed, p.jobs)?,
    };
    let mut files = Artifacts::new();
    files.add("report.json", pretty(&report));
    files.add("report.csv", report.to_csv_string());
    let inputs = input_digests(
        &args.dataset,
        &[args.checkpoint.as_deref(), args.train.config.as_deref()],
    )?;
    let m = manifest(
        "eval",
        serde_json::json!({ "train": cfg, "protocol": p.protocol, "k": p.k, "jobs": p.jobs }),
        &[("split", cfg.seed), ("train", cfg.seed)],
        inputs,
        start,
    );
    files.commit(&args.out, m)?;
    for f in &report.folds {
        println!(
            "fold {}: mae {:.4} (median-age baseline {:.4})",
            f.fold, f.mae, f.prior_mae
        );
    }
    println!("mean mae {:.4}", report.mean_mae);
    if let (Some(vf), Some(vs)) = (report.mu_vf, report.mu_vs) {
        println!("identity variance: features {vf:.4}, scaled distribution {vs:.4}");
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let start = Instant::now();
    ensure_out_dir(&args.out)?;
    let cfg = args.train.resolve()?;
    let ds = LabeledDataset::read_csv(&args.dataset)?;
    let cells = if let Some(path) = &args.grid {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        SweepGrid::parse(&text)?.cells(&cfg)?
    } else if args.loss_sets {
        loss_set_cells(cfg.lambda_c, cfg.lambda_t)?
    } else {
        grid_cells(&args.lambda_c_grid, &args.lambda_t_grid, cfg.pair_loss)?
    };
    let p = &args.protocol;
    let report = sweep(&ds, &cfg, &cells, p.protocol, p.k, cfg.seed, p.jobs)?;
    let mut files = Artifacts::new();
    files.add("sweep.jsonl", report.to_jsonl());
    files.add("sweep.csv", report.to_csv_string());
    let inputs = input_digests(
        &args.dataset,
        &[args.train.config.as_deref(), args.grid.as_deref()],
    )?;
    let m = manifest(
        "sweep",
        serde_json::json!({ "train": cfg, "cells": cells, "protocol": p.protocol, "k": p.k, "jobs": p.jobs }),
        &[("split", cfg.seed), ("train", cfg.seed)],
        inputs,
        start,
    );
    files.commit(&args.out, m)?;
    for r in &report.rows {
        println!(
            "{:<20} lambda_c {:<6} lambda_t {:<6} mae {:.4}",
            r.label, r.lambda_c, r.lambda_t, r.mean_mae
        );
    }
    Ok(())
}

fn cmd_selfcheck(args: &SelfcheckArgs) -> Result<bool> {
    if let Some(name) = &args.inject_fault {
        if !selfcheck::GRADIENT_CASES.contains(&name.as_str()) {
            return Err(Error::Config(format!(
                "unknown gradient case `{name}` (expected one of {})",
                selfcheck::GRADIENT_CASES.join(", ")
            )));
        }
    }
    let report = selfcheck::run(&SelfCheckOptions {
        points: args.points,
        seed: args.seed,
        inject_fault: args.inject_fault.clone(),
    });
    for o in &report.outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("{status} {}/{}: {}", o.suite, o.name, o.detail);
    }
    let failed: Vec<String> = report
        .failures()
        .map(|o| format!("{}/{}", o.suite, o.name))
        .collect();
    if failed.is_empty() {
        println!("all {} checks passed", report.outcomes.len());
    } else {
        eprintln!("failed: {}", failed.join(", "));
    }
    Ok(failed.is_empty())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Sweep(a) => cmd_sweep(a).map(|_| true),
        Command::Selfcheck(a) => cmd_selfcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
