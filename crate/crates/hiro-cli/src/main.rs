use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use hiro_cli::config::{resolve_out_root, ExperimentConfig, Overrides};
use hiro_cli::{export, runner};
use hiro_core::orchestrator::Ablation;

#[derive(Parser)]
#[command(
    name = "hiro",
    about = "Hierarchical RL experiments on kinematic navigation tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration into a fresh run directory.
    Train(TrainArgs),
    /// Evaluate a run from its newest checkpoint.
    Eval(EvalArgs),
    /// Train every ablation (or a chosen subset) under one output root.
    Sweep(SweepArgs),
    /// Aggregate eval records from run directories into CSV.
    Export(ExportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Environment name: maze, push, fall, or gather.
    #[arg(long)]
    env: Option<String>,
    /// Correction strategy applied at the higher level.
    #[arg(long)]
    correction: Option<String>,
    /// Master seed; every component stream derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Environment-step budget, rounded up to whole episodes.
    #[arg(long)]
    total_steps: Option<u64>,
    /// Output root (default: config out_dir, then $HIRO_OUT_DIR, then ./runs).
    #[arg(long)]
    out: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self, ablation: Option<&str>) -> Result<(ExperimentConfig, PathBuf)> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::from_path(path)?,
            None => ExperimentConfig::default(),
        };
        let overrides = Overrides {
            env: self.env.clone(),
            ablation: ablation.map(str::to_string),
            correction: self.correction.clone(),
            seed: self.seed,
            total_steps: self.total_steps,
        };
        config.apply(&overrides)?;
        config.validate()?;
        let env_var = std::env::var("HIRO_OUT_DIR").ok();
        let root = resolve_out_root(
            self.out.as_deref(),
            config.experiment.out_dir.as_deref(),
            env_var.as_deref(),
        );
        Ok((config, PathBuf::from(root)))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Experiment variant; hiro is the full method.
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory produced by train or sweep.
    #[arg(long)]
    run: PathBuf,
    /// Episode count; defaults to the run's eval_episodes.
    #[arg(long)]
    episodes: Option<usize>,
    /// Seed for the evaluation stream; defaults to the run's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Comma-separated ablations to run; defaults to all of them.
    #[arg(long, value_delimiter = ',')]
    ablations: Vec<String>,
}

#[derive(Args)]
struct ExportArgs {
    /// Run directories, or roots one level above them.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Sweep(args) => sweep(args),
        Command::Export(args) => export(args),
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let (config, root) = args.common.resolve(args.ablation.as_deref())?;
    let run = runner::run_experiment(&config, &root)?;
    println!("run directory: {}", run.dir.display());
    match run.summary.best_eval {
        Some(best) => println!("best eval: {} at step {}", best.score, best.env_steps),
        None => println!("best eval: none recorded"),
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let report = runner::evaluate_run(&args.run, args.episodes, args.seed)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let (config, root) = args.common.resolve(None)?;
    let ablations = if args.ablations.is_empty() {
        Ablation::ALL.to_vec()
    } else {
        args.ablations
            .iter()
            .map(|name| {
                Ablation::from_name(name).with_context(|| format!("unknown ablation {name:?}"))
            })
            .collect::<Result<Vec<_>>>()?
    };
    let runs = runner::run_sweep(&config, &root, &ablations)?;
    for run in &runs {
        println!(
            "{}: best eval {:?}",
            run.dir.display(),
            run.summary.best_eval.map(|e| e.score)
        );
    }
    Ok(())
}

fn export(args: ExportArgs) -> Result<()> {
    let dirs = export::collect_run_dirs(&args.runs)?;
    let rows = export::export_plot_data(&dirs)?;
    if rows.is_empty() {
        eprintln!("warning: no eval records found in {} run(s)", dirs.len());
    }
    match &args.out {
        Some(path) => {
            let file = std::fs::File::create(path)
                .with_context(|| format!("creating {}", path.display()))?;
            export::write_csv(&rows, file)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            export::write_csv(&rows, &mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}
