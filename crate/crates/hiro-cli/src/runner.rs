//! Run execution: owns the run directory, streams metrics, checkpoints on
//! evaluation boundaries, and writes the final summary.
//!
//! Determinism contract: metrics.jsonl carries no wall-clock data, so two
//! runs of the same config and seed produce byte-identical files. Timestamps
//! live in the run.log sidecar.

use std::cell::RefCell;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use hiro_core::metrics::{self, JsonlSink, MetricRecord, MetricsSink};
use hiro_core::orchestrator::{effective_correction, Ablation, Trainer};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LOG_FILE: &str = "run.log";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST_CHECKPOINT: &str = "latest";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub env_steps: u64,
    pub score: f64,
}

/// End-of-run report; `best_eval` is the maximum over eval records, not the
/// last one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub env: String,
    pub ablation: String,
    pub correction: String,
    pub master_seed: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub best_eval: Option<EvalPoint>,
    pub final_eval: Option<EvalPoint>,
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub summary: Summary,
}

/// Rejects records carrying non-finite numbers before they reach the file,
/// so a numeric blow-up aborts the run instead of corrupting its metrics.
struct GuardedSink<S> {
    inner: S,
}

impl<S: MetricsSink> MetricsSink for GuardedSink<S> {
    fn record(&mut self, record: &MetricRecord) -> hiro_core::Result<()> {
        let finite = match record {
            MetricRecord::Train {
                episode_return,
                low_critic_loss,
                high_critic_loss,
                ..
            } => {
                episode_return.is_finite()
                    && low_critic_loss.is_none_or(f64::is_finite)
                    && high_critic_loss.is_none_or(f64::is_finite)
            }
            MetricRecord::Eval { score, .. } => score.is_finite(),
            MetricRecord::CorrectionStats {
                relabel_changed_fraction,
                ..
            } => relabel_changed_fraction.is_finite(),
        };
        if !finite {
            return Err(hiro_core::Error::Numeric(format!(
                "non-finite metric at step {}",
                record.env_steps()
            )));
        }
        self.inner.record(record)
    }
}

/// Wall-clock logger for the run.log sidecar.
struct RunLog {
    file: File,
}

impl RunLog {
    fn create(path: &Path) -> Result<RunLog> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(RunLog { file })
    }

    fn line(&mut self, message: &str) {
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default();
        // Logging must never abort a run; drop the line on I/O error.
        let _ = writeln!(self.file, "[{:.3}] {message}", now.as_secs_f64());
        let _ = self.file.flush();
    }
}

fn write_checkpoint(dir: &Path, blobs: &[(String, Vec<u8>)]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, bytes) in blobs {
        fs::write(dir.join(name), bytes)
            .with_context(|| format!("writing {}", dir.join(name).display()))?;
    }
    Ok(())
}

/// Executes one training run in `out_root`/`run_name`. The directory must
/// not already exist; every artifact of the run lives inside it.
pub fn run_experiment(config: &ExperimentConfig, out_root: &Path) -> Result<RunArtifacts> {
    config.validate()?;
    let kind = config.env_kind()?;
    let seed = config.experiment.master_seed;

    let dir = out_root.join(config.run_name());
    if dir.exists() {
        bail!(
            "run directory {} already exists; each run owns its directory",
            dir.display()
        );
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let mut echo = config.clone();
    echo.experiment.out_dir = Some(out_root.display().to_string());
    fs::write(dir.join(CONFIG_FILE), echo.to_toml()?)
        .with_context(|| format!("writing {}", dir.join(CONFIG_FILE).display()))?;

    let mut log = RunLog::create(&dir.join(LOG_FILE))?;
    log.line(&format!("run start: {} seed {seed}", config.run_name()));

    let metrics_path = dir.join(METRICS_FILE);
    let file = File::create(&metrics_path)
        .with_context(|| format!("creating {}", metrics_path.display()))?;
    let mut sink = GuardedSink {
        inner: JsonlSink::new(BufWriter::new(file)),
    };

    let mut trainer = Trainer::new(kind, config.hiro_config(), seed)?;
    let last_good = RefCell::new(trainer.snapshot());
    let checkpoint_every = config.experiment.checkpoint_every;
    let last_checkpoint = RefCell::new(0u64);
    let result = trainer.run_with(&mut sink, |t| {
        let snapshot = t.snapshot();
        let due =
            checkpoint_every > 0 && t.env_steps() - *last_checkpoint.borrow() >= checkpoint_every;
        if due {
            write_checkpoint(&dir.join(CHECKPOINT_DIR).join(LATEST_CHECKPOINT), &snapshot)
                .map_err(|e| hiro_core::Error::Snapshot(format!("{e:#}")))?;
            *last_checkpoint.borrow_mut() = t.env_steps();
        }
        *last_good.borrow_mut() = snapshot;
        Ok(())
    });

    if let Err(err) = result {
        log.line(&format!("aborted at step {}: {err}", trainer.env_steps()));
        let ckpt = dir.join(CHECKPOINT_DIR).join(LAST_GOOD_CHECKPOINT);
        write_checkpoint(&ckpt, &last_good.borrow())?;
        log.line(&format!("last good state written to {}", ckpt.display()));
        return Err(err).context(format!("run {} aborted", config.run_name()));
    }

    write_checkpoint(
        &dir.join(CHECKPOINT_DIR).join(LATEST_CHECKPOINT),
        &trainer.snapshot(),
    )?;

    let summary = summarize(&echo, &trainer, &metrics_path)?;
    let json = serde_json::to_string_pretty(&summary).context("serializing summary")?;
    fs::write(dir.join(SUMMARY_FILE), json + "\n")
        .with_context(|| format!("writing {}", dir.join(SUMMARY_FILE).display()))?;
    log.line(&format!(
        "run complete: {} env steps, best eval {:?}",
        trainer.env_steps(),
        summary.best_eval.map(|e| e.score)
    ));
    Ok(RunArtifacts { dir, summary })
}

fn summarize(config: &ExperimentConfig, trainer: &Trainer, metrics_path: &Path) -> Result<Summary> {
    let file =
        File::open(metrics_path).with_context(|| format!("reading {}", metrics_path.display()))?;
    let records = metrics::read_metrics(std::io::BufReader::new(file))?;
    let best_eval =
        metrics::best_eval(&records).map(|(env_steps, score)| EvalPoint { env_steps, score });
    let final_eval = records.iter().rev().find_map(|r| match r {
        MetricRecord::Eval {
            env_steps, score, ..
        } => Some(EvalPoint {
            env_steps: *env_steps,
            score: *score,
        }),
        _ => None,
    });
    let correction = effective_correction(config.hiro.ablation, config.hiro.correction);
    Ok(Summary {
        env: config.experiment.env.clone(),
        ablation: config.hiro.ablation.name().to_string(),
        correction: correction.name().to_string(),
        master_seed: config.experiment.master_seed,
        env_steps: trainer.env_steps(),
        episodes: trainer.episodes(),
        best_eval,
        final_eval,
    })
}

/// One run per ablation under a shared output root. All arms are attempted;
/// any failure is reported after the rest have run.
pub fn run_sweep(
    base: &ExperimentConfig,
    out_root: &Path,
    ablations: &[Ablation],
) -> Result<Vec<RunArtifacts>> {
    let mut artifacts = Vec::new();
    let mut failures = Vec::new();
    for &ablation in ablations {
        let mut config = base.clone();
        config.hiro.ablation = ablation;
        match run_experiment(&config, out_root) {
            Ok(run) => artifacts.push(run),
            Err(err) => failures.push(format!("{}: {err:#}", ablation.name())),
        }
    }
    if !failures.is_empty() {
        bail!(
            "{} of {} sweep arms failed:\n{}",
            failures.len(),
            ablations.len(),
            failures.join("\n")
        );
    }
    Ok(artifacts)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub env: String,
    pub score: f64,
    pub episodes: usize,
}

/// Re-evaluates a finished (or aborted) run from its newest checkpoint.
pub fn evaluate_run(
    run_dir: &Path,
    episodes: Option<usize>,
    seed: Option<u64>,
) -> Result<EvalReport> {
    let mut config = ExperimentConfig::from_path(&run_dir.join(CONFIG_FILE))?;
    if let Some(n) = episodes {
        config.hiro.eval_episodes = n;
    }
    config.validate()?;

    let ckpt_root = run_dir.join(CHECKPOINT_DIR);
    let ckpt = [LATEST_CHECKPOINT, LAST_GOOD_CHECKPOINT]
        .iter()
        .map(|name| ckpt_root.join(name))
        .find(|p| p.is_dir())
        .with_context(|| format!("no checkpoints under {}", ckpt_root.display()))?;

    let master = seed.unwrap_or(config.experiment.master_seed);
    let mut trainer = Trainer::new(config.env_kind()?, config.hiro_config(), master)?;
    for (name, _) in trainer.snapshot() {
        let bytes = fs::read(ckpt.join(&name))
            .with_context(|| format!("reading {}", ckpt.join(&name).display()))?;
        trainer.restore(&name, &bytes)?;
    }
    let score = trainer.evaluate()?;
    Ok(EvalReport {
        env: config.experiment.env.clone(),
        score,
        episodes: config.hiro.eval_episodes,
    })
}
