//! Trace recording, convergence detection, batches-to-target, normalized
//! slowdown, and multi-seed aggregation.
//!
//! Work is measured in batches processed across all workers (P batches per
//! lockstep iteration); traces are JSONL event streams, summaries CSV rows.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coherence::{ProbeRecord, VerificationReport};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metric {0:?} never appears in the trace")]
    UnknownMetric(String),
    #[error("group {0:?} has no converged staleness-0 baseline")]
    MissingBaseline(String),
    #[error("malformed trace line {line}: {message}")]
    BadTrace { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One recorded measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsEvent {
    pub run_id: String,
    /// Cumulative batches processed across all workers when recorded.
    pub batches_processed: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AtLeast,
    AtMost,
}

/// Convergence criterion on a named metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTarget {
    pub metric: String,
    pub threshold: f64,
    pub direction: Direction,
}

impl ConvergenceTarget {
    pub fn satisfied(&self, value: f64) -> bool {
        match self.direction {
            Direction::AtLeast => value >= self.threshold,
            Direction::AtMost => value <= self.threshold,
        }
    }
}

/// Ordered log of one run's metric events plus probe records.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunTrace {
    pub run_id: String,
    pub fingerprint: String,
    pub workload: String,
    pub optimizer: String,
    pub staleness: u32,
    pub workers: usize,
    pub seed: u64,
    pub events: Vec<MetricsEvent>,
    pub probes: Vec<ProbeRecord>,
    pub report: Option<VerificationReport>,
    pub diverged: Option<String>,
    pub batches_total: u64,
}

impl RunTrace {
    /// Last recorded value of the named metric.
    pub fn final_value(&self, metric: &str) -> Option<f64> {
        self.events
            .iter()
            .rev()
            .find(|e| e.metric == metric)
            .map(|e| e.value)
    }

    /// (batches, value) series of the named metric, in record order.
    pub fn series(&self, metric: &str) -> Vec<(u64, f64)> {
        self.events
            .iter()
            .filter(|e| e.metric == metric)
            .map(|e| (e.batches_processed, e.value))
            .collect()
    }
}

/// One line of the JSONL trace stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceLine {
    Meta {
        run_id: String,
        fingerprint: String,
        workload: String,
        optimizer: String,
        staleness: u32,
        workers: usize,
        seed: u64,
        batches_total: u64,
    },
    Metric(MetricsEvent),
    Probe(ProbeRecord),
    Report(VerificationReport),
    Divergence { message: String },
}

/// Serialize a trace as JSONL, one event per line, meta line first.
pub fn write_trace<W: Write>(trace: &RunTrace, mut w: W) -> Result<(), MetricsError> {
    let mut emit = |line: &TraceLine| -> Result<(), MetricsError> {
        serde_json::to_writer(&mut w, line).map_err(|e| MetricsError::BadTrace {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(w)?;
        Ok(())
    };
    emit(&TraceLine::Meta {
        run_id: trace.run_id.clone(),
        fingerprint: trace.fingerprint.clone(),
        workload: trace.workload.clone(),
        optimizer: trace.optimizer.clone(),
        staleness: trace.staleness,
        workers: trace.workers,
        seed: trace.seed,
        batches_total: trace.batches_total,
    })?;
    for event in &trace.events {
        emit(&TraceLine::Metric(event.clone()))?;
    }
    for probe in &trace.probes {
        emit(&TraceLine::Probe(probe.clone()))?;
    }
    if let Some(report) = &trace.report {
        emit(&TraceLine::Report(report.clone()))?;
    }
    if let Some(message) = &trace.diverged {
        emit(&TraceLine::Divergence {
            message: message.clone(),
        })?;
    }
    Ok(())
}

/// Parse a JSONL trace produced by [`write_trace`].
pub fn read_trace<R: BufRead>(r: R) -> Result<RunTrace, MetricsError> {
    let mut trace = RunTrace::default();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine =
            serde_json::from_str(&line).map_err(|e| MetricsError::BadTrace {
                line: lineno + 1,
                message: e.to_string(),
            })?;
        match parsed {
            TraceLine::Meta {
                run_id,
                fingerprint,
                workload,
                optimizer,
                staleness,
                workers,
                seed,
                batches_total,
            } => {
                trace.run_id = run_id;
                trace.fingerprint = fingerprint;
                trace.workload = workload;
                trace.optimizer = optimizer;
                trace.staleness = staleness;
                trace.workers = workers;
                trace.seed = seed;
                trace.batches_total = batches_total;
            }
            TraceLine::Metric(e) => trace.events.push(e),
            TraceLine::Probe(p) => trace.probes.push(p),
            TraceLine::Report(rep) => trace.report = Some(rep),
            TraceLine::Divergence { message } => trace.diverged = Some(message),
        }
    }
    Ok(trace)
}

/// First cumulative batch count at which the target metric is satisfied.
pub fn detect_convergence(
    trace: &RunTrace,
    target: &ConvergenceTarget,
) -> Result<Option<u64>, MetricsError> {
    let mut seen = false;
    for event in &trace.events {
        if event.metric == target.metric {
            seen = true;
            if target.satisfied(event.value) {
                return Ok(Some(event.batches_processed));
            }
        }
    }
    if seen {
        Ok(None)
    } else {
        Err(MetricsError::UnknownMetric(target.metric.clone()))
    }
}

/// Per-run summary row of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub run_id: String,
    pub workload: String,
    pub optimizer: String,
    pub staleness: u32,
    pub workers: usize,
    pub seed: u64,
    pub batches_to_target: Option<u64>,
    pub final_metric: f64,
}

impl RunSummary {
    /// Group key: configuration minus staleness and seed.
    pub fn group_key(&self) -> String {
        format!("{}-{}-p{}", self.workload, self.optimizer, self.workers)
    }
}

/// Sample mean and n-1 standard deviation of batches-to-target over runs
/// that reached the target. Returns n = number of reached runs; None when
/// nothing converged.
pub fn aggregate_seeds(summaries: &[RunSummary]) -> Option<(f64, f64, usize)> {
    let reached: Vec<f64> = summaries
        .iter()
        .filter_map(|s| s.batches_to_target)
        .map(|b| b as f64)
        .collect();
    if reached.is_empty() {
        return None;
    }
    let n = reached.len();
    let mean = reached.iter().sum::<f64>() / n as f64;
    let std = if n == 1 {
        0.0
    } else {
        (reached.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Some((mean, std, n))
}

/// One staleness level's normalized slowdown within a group.
#[derive(Clone, Debug, PartialEq)]
pub struct SlowdownRow {
    pub staleness: u32,
    /// mean batches(s) / mean batches(0); absent when nothing converged.
    pub mean_ratio: Option<f64>,
    /// std of batches(s) scaled by the staleness-0 mean.
    pub std_ratio: f64,
    /// Converged runs at this staleness.
    pub n: usize,
    /// Runs that never reached the target within budget; excluded from
    /// the mean and reported separately.
    pub omitted: usize,
}

/// Normalize batches-to-target by the staleness-0 mean of the same group.
/// `group` must share everything except staleness and seed.
pub fn normalize_slowdown(group: &[RunSummary]) -> Result<Vec<SlowdownRow>, MetricsError> {
    let key = group
        .first()
        .map(RunSummary::group_key)
        .unwrap_or_default();
    let baseline: Vec<RunSummary> = group.iter().filter(|s| s.staleness == 0).cloned().collect();
    let (base_mean, _, _) =
        aggregate_seeds(&baseline).ok_or_else(|| MetricsError::MissingBaseline(key.clone()))?;

    let mut staleness_levels: Vec<u32> = group.iter().map(|s| s.staleness).collect();
    staleness_levels.sort_unstable();
    staleness_levels.dedup();

    let mut rows = Vec::new();
    for s in staleness_levels {
        let at_s: Vec<RunSummary> = group.iter().filter(|r| r.staleness == s).cloned().collect();
        let omitted = at_s.iter().filter(|r| r.batches_to_target.is_none()).count();
        match aggregate_seeds(&at_s) {
            Some((mean, std, n)) => rows.push(SlowdownRow {
                staleness: s,
                mean_ratio: Some(mean / base_mean),
                std_ratio: std / base_mean,
                n,
                omitted,
            }),
            None => rows.push(SlowdownRow {
                staleness: s,
                mean_ratio: None,
                std_ratio: 0.0,
                n: 0,
                omitted,
            }),
        }
    }
    Ok(rows)
}

pub const SUMMARY_HEADER: &str =
    "run_id,workload,optimizer,staleness,workers,seed,batches_to_target,final_metric";

pub fn summary_csv_row(s: &RunSummary) -> String {
    let batches = match s.batches_to_target {
        Some(b) => b.to_string(),
        None => "not_reached".to_string(),
    };
    format!(
        "{},{},{},{},{},{},{},{}",
        s.run_id, s.workload, s.optimizer, s.staleness, s.workers, s.seed, batches, s.final_metric
    )
}

/// Parse one row written by [`summary_csv_row`].
pub fn parse_summary_row(line: &str, lineno: usize) -> Result<RunSummary, MetricsError> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 8 {
        return Err(MetricsError::BadTrace {
            line: lineno,
            message: format!("expected 8 summary fields, got {}", fields.len()),
        });
    }
    let bad = |message: String| MetricsError::BadTrace {
        line: lineno,
        message,
    };
    Ok(RunSummary {
        run_id: fields[0].to_string(),
        workload: fields[1].to_string(),
        optimizer: fields[2].to_string(),
        staleness: fields[3]
            .parse()
            .map_err(|_| bad(format!("bad staleness {:?}", fields[3])))?,
        workers: fields[4]
            .parse()
            .map_err(|_| bad(format!("bad workers {:?}", fields[4])))?,
        seed: fields[5]
            .parse()
            .map_err(|_| bad(format!("bad seed {:?}", fields[5])))?,
        batches_to_target: if fields[6] == "not_reached" {
            None
        } else {
            Some(
                fields[6]
                    .parse()
                    .map_err(|_| bad(format!("bad batches {:?}", fields[6])))?,
            )
        },
        final_metric: fields[7]
            .parse()
            .map_err(|_| bad(format!("bad final metric {:?}", fields[7])))?,
    })
}

pub const SLOWDOWN_HEADER: &str = "group,staleness,mean_ratio,std,n,omitted";

pub fn slowdown_csv_row(group: &str, row: &SlowdownRow) -> String {
    let ratio = match row.mean_ratio {
        Some(r) => format!("{r}"),
        None => "omitted".to_string(),
    };
    format!(
        "{},{},{},{},{},{}",
        group, row.staleness, ratio, row.std_ratio, row.n, row.omitted
    )
}
