//! Aggregates eval curves from run directories into plot-ready CSV: one row
//! per (ablation, env_steps) with mean and standard error across seeds.
//! x values are raw environment steps; callers scale to millions.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use hiro_core::metrics::{self, MetricRecord};

use crate::config::ExperimentConfig;
use crate::runner::{CONFIG_FILE, METRICS_FILE};

#[derive(Debug, Clone, PartialEq)]
pub struct ExportRow {
    pub env_steps: u64,
    pub ablation: String,
    pub mean: f64,
    pub stderr: f64,
}

/// Accepts run directories directly or roots one level above them (as a
/// sweep leaves behind).
pub fn collect_run_dirs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for path in paths {
        if path.join(METRICS_FILE).is_file() {
            dirs.push(path.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = std::fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|child| child.join(METRICS_FILE).is_file())
            .collect();
        if children.is_empty() {
            bail!(
                "{} is not a run directory and contains none",
                path.display()
            );
        }
        children.sort();
        dirs.append(&mut children);
    }
    Ok(dirs)
}

/// Mean and standard error per (ablation, env_steps) over the runs that
/// evaluated there. A single sample reports stderr 0.
pub fn export_plot_data(run_dirs: &[PathBuf]) -> Result<Vec<ExportRow>> {
    let mut groups: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    for dir in run_dirs {
        let config = ExperimentConfig::from_path(&dir.join(CONFIG_FILE))?;
        let ablation = config.hiro.ablation.name().to_string();
        let file = File::open(dir.join(METRICS_FILE))
            .with_context(|| format!("reading {}", dir.join(METRICS_FILE).display()))?;
        let records = metrics::read_metrics(BufReader::new(file))
            .with_context(|| format!("parsing {}", dir.join(METRICS_FILE).display()))?;
        for record in records {
            if let MetricRecord::Eval {
                env_steps, score, ..
            } = record
            {
                groups
                    .entry((ablation.clone(), env_steps))
                    .or_default()
                    .push(score);
            }
        }
    }
    Ok(groups
        .into_iter()
        .map(|((ablation, env_steps), scores)| {
            let (mean, stderr) = mean_stderr(&scores);
            ExportRow {
                env_steps,
                ablation,
                mean,
                stderr,
            }
        })
        .collect())
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn write_csv<W: Write>(rows: &[ExportRow], mut out: W) -> Result<()> {
    writeln!(out, "env_steps,ablation,mean,stderr")?;
    for row in rows {
        writeln!(
            out,
            "{},{},{},{}",
            row.env_steps, row.ablation, row.mean, row.stderr
        )?;
    }
    Ok(())
}
