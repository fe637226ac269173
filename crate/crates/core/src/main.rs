use clap::{Args, Parser, Subcommand};
use cllab::config::{Dataset, ExperimentConfig};
use cllab::corpus::{epoch_batches, TokenSequence};
use cllab::diagnostics::{geometry_report, rank_report, variance_report};
use cllab::encoder::{forward, ForwardMode};
use cllab::experiment::{run_grid, write_grid_csv, AblationGrid, GridAxis};
use cllab::objectives::{audit_suite, AuditOptions, LossConfig};
use cllab::trainer::{evaluate, load_checkpoint, save_checkpoint, train, write_metrics_csv, Checkpoint};
use cllab::{Error, Result, Rng};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cllab", version, about = "Contrastive sentence-embedding laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config with flat dotted keys; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set objective=combined`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load_with_env(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes metrics.csv, best.ckpt and report.json.
    Train(ConfigArgs),
    /// Run an ablation grid; writes ablate_<axis>.csv and .json.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// m | lambda_dcl | tau_dcl | noise
        #[arg(long)]
        axis: String,
        /// Comma-separated values; the default grid of the axis otherwise.
        #[arg(long)]
        values: Option<String>,
    },
    /// Rank, variance and geometry diagnostics for a checkpoint.
    Diagnose {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Gaussian rows appended to the views before measuring rank.
        #[arg(long, value_delimiter = ',', default_value = "0,100,300,704")]
        pad: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        /// Sentences in the sampled batch.
        #[arg(long, default_value_t = 64)]
        batch: usize,
        /// Measure variance of dropout-off forwards.
        #[arg(long)]
        deterministic: bool,
    },
    /// Finite-difference audit of every objective's gradient.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        #[arg(long, hide = true, value_name = "FAULT")]
        inject_fault: Option<String>,
    },
    /// Dev and test Spearman of a checkpoint.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("JSON value serializes") + "\n";
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn cmd_train(args: &ConfigArgs) -> Result<()> {
    let cfg = args.load()?;
    let data = cfg.load_data()?;
    create_dir(&cfg.output_dir)?;
    let out = train(&cfg.train, &data.corpus, &data.dev, &data.test, Some(&cfg.output_dir.join("last_good.ckpt")))?;
    let r = &out.report;
    write_metrics_csv(&cfg.output_dir.join("metrics.csv"), &r.history)?;
    save_checkpoint(&out.best_params, &cfg.output_dir.join("best.ckpt"), cfg.train.seed, r.best_step, cfg.echo())?;
    write_json(&cfg.output_dir.join("report.json"), &json!({"config": cfg.echo(), "report": r}))?;
    println!(
        "{}: best dev spearman {:.4} at step {}, test spearman {:.4}",
        r.objective.name(),
        r.best_dev_spearman,
        r.best_step,
        r.test_spearman
    );
    Ok(())
}

fn cmd_ablate(args: &ConfigArgs, axis: &str, values: Option<&str>) -> Result<()> {
    let cfg = args.load()?;
    let axis = GridAxis::parse(axis)
        .ok_or_else(|| Error::Config(format!("--axis: unknown axis {axis:?} (expected m, lambda_dcl, tau_dcl or noise)")))?;
    let grid = match values {
        Some(v) => AblationGrid::parse_values(axis, v)?,
        None => AblationGrid::default_for(axis),
    };
    let data = cfg.load_data()?;
    create_dir(&cfg.output_dir)?;
    let cells = run_grid(&cfg.train, &grid, &data);
    let stem = format!("ablate_{}", axis.name());
    write_grid_csv(&cfg.output_dir.join(format!("{stem}.csv")), &cells)?;
    let rows: Vec<_> = cells
        .iter()
        .map(|c| match &c.outcome {
            Ok(r) => json!({"value": c.value.to_string(), "report": r}),
            Err(e) => json!({"value": c.value.to_string(), "error": e}),
        })
        .collect();
    write_json(&cfg.output_dir.join(format!("{stem}.json")), &json!({"axis": axis.name(), "config": cfg.echo(), "cells": rows}))?;
    for c in &cells {
        match &c.outcome {
            Ok(r) => println!("{} = {}: best dev spearman {:.4}", axis.name(), c.value, r.best_dev_spearman),
            Err(e) => println!("{} = {}: failed: {e}", axis.name(), c.value),
        }
    }
    Ok(())
}

fn load_for(cfg: &ExperimentConfig, path: &Path) -> Result<(Checkpoint, Dataset)> {
    let ck = load_checkpoint(path)?;
    if ck.params.config.vocab_size != cfg.corpus.vocab_size {
        return Err(Error::Config(format!(
            "corpus.vocab_size: config has {}, checkpoint {} has {}",
            cfg.corpus.vocab_size,
            path.display(),
            ck.params.config.vocab_size
        )));
    }
    let data = cfg.load_data()?;
    Ok((ck, data))
}

struct DiagnoseArgs {
    pad: Vec<usize>,
    k: usize,
    draws: usize,
    batch: usize,
    deterministic: bool,
}

fn cmd_diagnose(args: &ConfigArgs, checkpoint: &Path, d: &DiagnoseArgs) -> Result<()> {
    let cfg = args.load()?;
    let (ck, data) = load_for(&cfg, checkpoint)?;
    let corpus: Vec<&TokenSequence> = data.corpus.iter().filter(|s| !s.is_empty()).collect();
    let root = Rng::new(cfg.train.seed);
    let indices = epoch_batches(corpus.len(), d.batch, root.split(0).next_u64(), 0)?;
    let batch: Vec<&TokenSequence> = indices[0].iter().map(|&i| corpus[i]).collect();

    let mut rng = root.split(1);
    let (z1, _) = forward(&ck.params, &batch, ForwardMode::Dropout, &mut rng)?;
    let (z2, _) = forward(&ck.params, &batch, ForwardMode::Dropout, &mut rng)?;
    let rank = rank_report(&z1, &z2, &d.pad, &mut root.split(2))?;
    let variance = variance_report(&ck.params, &batch, d.k, d.draws, &root.split(3), d.deterministic)?;
    let geometry = geometry_report(&z1, &z2, &z1.vstack(&z2))?;
    let report = json!({
        "checkpoint": checkpoint,
        "seed": cfg.train.seed,
        "rank": rank,
        "variance": variance,
        "geometry": geometry,
    });
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("diagnose.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("JSON value serializes"));
    Ok(())
}

/// Returns whether every audit stayed below `threshold`.
fn cmd_gradcheck(seeds: u64, n: usize, d: usize, step: f64, threshold: f64, fault: Option<&str>) -> Result<bool> {
    let inject_sign_flip = match fault {
        None => false,
        Some("sign-flip") => true,
        Some(other) => return Err(Error::Config(format!("--inject-fault: unknown fault {other:?}"))),
    };
    let opts = AuditOptions { step, inject_sign_flip, ..AuditOptions::default() };
    let entries = audit_suite(seeds, n, d, &LossConfig::default(), opts)?;
    let mut ok = true;
    for e in &entries {
        let r = &e.result;
        let pass = r.max_rel_error < threshold;
        ok &= pass;
        let (input, row, col) = r.worst;
        println!(
            "{} seed {}: max rel error {:.3e} at input {input} ({row}, {col}) analytic {:.6e} numeric {:.6e} {}",
            r.objective,
            e.seed,
            r.max_rel_error,
            r.analytic,
            r.numeric,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn cmd_eval(args: &ConfigArgs, checkpoint: &Path) -> Result<()> {
    let cfg = args.load()?;
    let (ck, data) = load_for(&cfg, checkpoint)?;
    let dev = evaluate(&ck.params, &data.dev, cfg.train.eval_pre_mlp)?;
    let test = evaluate(&ck.params, &data.test, cfg.train.eval_pre_mlp)?;
    let report = json!({"checkpoint": checkpoint, "dev_spearman": dev, "test_spearman": test});
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("eval.json"), &report)?;
    println!("dev spearman {dev:.4}, test spearman {test:.4}");
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(args) => cmd_train(&args).map(|_| true),
        Command::Ablate { config, axis, values } => cmd_ablate(&config, &axis, values.as_deref()).map(|_| true),
        Command::Diagnose { config, checkpoint, pad, k, draws, batch, deterministic } => {
            let d = DiagnoseArgs { pad, k, draws, batch, deterministic };
            cmd_diagnose(&config, &checkpoint, &d).map(|_| true)
        }
        Command::Gradcheck { seeds, n, d, step, threshold, inject_fault } => {
            cmd_gradcheck(seeds, n, d, step, threshold, inject_fault.as_deref())
        }
        Command::Eval { config, checkpoint } => cmd_eval(&config, &checkpoint).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
