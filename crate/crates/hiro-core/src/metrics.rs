//! Run metrics: typed records, JSON-lines persistence, lenient reload.
//!
//! Records carry no wall-clock data so that two runs of the same config and
//! seed serialize byte-identically; timing notes belong in a sidecar log.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// One metrics line. Field order is fixed by declaration order, keeping the
/// serialized schema stable within and across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    /// Emitted at every training-episode end.
    Train {
        env_steps: u64,
        episode: u64,
        episode_return: f64,
        /// Mean critic losses over the updates since the previous record;
        /// None when that level did not train.
        low_critic_loss: Option<f64>,
        high_critic_loss: Option<f64>,
    },
    /// Emitted at every evaluation boundary.
    Eval {
        env_steps: u64,
        /// Success rate on navigation tasks, mean return on Gather.
        score: f64,
        episodes: u64,
    },
    /// Cumulative goal-relabeling statistics, emitted with each Eval record.
    CorrectionStats {
        env_steps: u64,
        /// Fraction of relabeled segments whose goal differs from the stored
        /// one; exactly 0 when the correction is disabled.
        relabel_changed_fraction: f64,
        segments_relabeled: u64,
    },
}

impl MetricRecord {
    pub fn env_steps(&self) -> u64 {
        match self {
            MetricRecord::Train { env_steps, .. }
            | MetricRecord::Eval { env_steps, .. }
            | MetricRecord::CorrectionStats { env_steps, .. } => *env_steps,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metric records always serialize")
    }
}

pub trait MetricsSink {
    fn record(&mut self, record: &MetricRecord) -> Result<()>;
}

/// Collects records in memory; the test and aggregation sink.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub records: Vec<MetricRecord>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }
}

impl MetricsSink for MemorySink {
    fn record(&mut self, record: &MetricRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }
}

/// Appends one JSON line per record, flushing each so a crash loses at most
/// the line being written.
pub struct JsonlSink<W: Write> {
    writer: W,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(writer: W) -> Self {
        JsonlSink { writer }
    }

    pub fn into_inner(self) -> W {
        self.writer
    }
}

impl<W: Write> MetricsSink for JsonlSink<W> {
    fn record(&mut self, record: &MetricRecord) -> Result<()> {
        let line = record.to_line();
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        Ok(())
    }
}

/// Broadcasts each record to both sinks.
pub struct TeeSink<'a> {
    pub first: &'a mut dyn MetricsSink,
    pub second: &'a mut dyn MetricsSink,
}

impl MetricsSink for TeeSink<'_> {
    fn record(&mut self, record: &MetricRecord) -> Result<()> {
        self.first.record(record)?;
        self.second.record(record)
    }
}

/// Reads a metrics stream line by line. A truncated or garbled final line is
/// tolerated (the record it held is dropped); a bad line anywhere else is an
/// error, since that means real corruption rather than an interrupted write.
pub fn read_metrics<R: BufRead>(reader: R) -> Result<Vec<MetricRecord>> {
    let mut records = Vec::new();
    let mut pending_error: Option<String> = None;
    for line in reader.lines() {
        let line = line?;
        if let Some(bad) = pending_error.take() {
            return Err(Error::Parse(format!("corrupt metrics line: {bad}")));
        }
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<MetricRecord>(&line) {
            Ok(rec) => records.push(rec),
            Err(_) => pending_error = Some(line),
        }
    }
    Ok(records)
}

/// Highest evaluation score and the step it occurred at.
pub fn best_eval(records: &[MetricRecord]) -> Option<(u64, f64)> {
    let mut best: Option<(u64, f64)> = None;
    for rec in records {
        if let MetricRecord::Eval {
            env_steps, score, ..
        } = rec
        {
            if best.is_none_or(|(_, s)| *score > s) {
                best = Some((*env_steps, *score));
            }
        }
    }
    best
}
