//! Command implementations behind the `stalesim` binary: single runs,
//! sweep driving, theorem verification, coherence probing, and summary
//! reporting. Each command is a library function so integration tests can
//! drive it directly and the binary stays a thin argument parser.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use stalesim_core::coherence::{
    estimate_lipschitz, estimate_sigma_sq, verify_bound, TheoremParams, TheoremSchedule,
    VerificationReport,
};
use stalesim_core::config::ExperimentConfig;
use stalesim_core::metrics::{
    detect_convergence, normalize_slowdown, parse_summary_row, read_trace, summary_csv_row,
    write_trace, MetricsError, RunSummary, RunTrace, SlowdownRow, SLOWDOWN_HEADER, SUMMARY_HEADER,
};
use stalesim_core::simcore::{run, RngSet, SimError};
use stalesim_core::Real;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or environment; exit code 2.
    Config(String),
    /// A run diverged numerically; exit code 3.
    Divergence(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Divergence(m) => write!(f, "divergence: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }
}

fn io_err(context: &str, e: std::io::Error) -> CliError {
    CliError::Config(format!("{context}: {e}"))
}

fn sim_err(e: SimError) -> CliError {
    match e {
        SimError::Config(m) => CliError::Config(m),
        SimError::NonFinite { .. } => CliError::Divergence(e.to_string()),
    }
}

pub struct RunOutput {
    pub outdir: PathBuf,
    pub summaries: Vec<RunSummary>,
    pub trace_paths: Vec<PathBuf>,
    pub diverged: usize,
}

fn summarize(cfg: &ExperimentConfig, trace: &RunTrace, metric_name: &str) -> RunSummary {
    let batches_to_target = cfg
        .target
        .as_ref()
        .and_then(|t| detect_convergence(trace, t).ok().flatten());
    RunSummary {
        run_id: trace.run_id.clone(),
        workload: trace.workload.clone(),
        optimizer: trace.optimizer.clone(),
        staleness: trace.staleness,
        workers: trace.workers,
        seed: trace.seed,
        batches_to_target,
        final_metric: trace.final_value(metric_name).unwrap_or(f64::NAN),
    }
}

fn write_trace_file(outdir: &Path, trace: &RunTrace) -> Result<PathBuf, CliError> {
    let path = outdir.join(format!("{}.jsonl", trace.run_id));
    let file = fs::File::create(&path)
        .map_err(|e| io_err(&format!("creating {}", path.display()), e))?;
    let mut buf = std::io::BufWriter::new(file);
    write_trace(trace, &mut buf).map_err(|e| CliError::Config(e.to_string()))?;
    buf.flush()
        .map_err(|e| io_err(&format!("writing {}", path.display()), e))?;
    Ok(path)
}

fn append_summary_rows(outdir: &Path, rows: &[RunSummary]) -> Result<(), CliError> {
    let path = outdir.join("summary.csv");
    let fresh = !path.exists();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| io_err(&format!("opening {}", path.display()), e))?;
    if fresh {
        writeln!(file, "{SUMMARY_HEADER}")
            .map_err(|e| io_err("writing summary header", e))?;
    }
    for row in rows {
        writeln!(file, "{}", summary_csv_row(row))
            .map_err(|e| io_err("writing summary row", e))?;
    }
    Ok(())
}

fn execute_one(
    cfg: &ExperimentConfig,
    seed: u64,
    schedule: Option<TheoremSchedule>,
) -> Result<RunTrace, CliError> {
    let workload = cfg
        .build_workload::<Real>()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let settings = cfg
        .run_settings(workload.as_ref(), seed, schedule)
        .map_err(|e| CliError::Config(e.to_string()))?;
    run(workload.as_ref(), &settings).map_err(sim_err)
}

/// `stalesim run <cfg>`: one run per seed; writes `<outdir>/<run_id>.jsonl`
/// and appends to `<outdir>/summary.csv`.
pub fn cmd_run(cfg_path: &Path) -> Result<RunOutput, CliError> {
    let cfg = ExperimentConfig::from_file(cfg_path).map_err(|e| CliError::Config(e.to_string()))?;
    let outdir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&outdir)
        .map_err(|e| io_err(&format!("creating {}", outdir.display()), e))?;
    let workload = cfg
        .build_workload::<Real>()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let metric_name = workload.quality_metric().name;

    let mut summaries = Vec::new();
    let mut trace_paths = Vec::new();
    let mut diverged = 0usize;
    let mut first_divergence = None;
    for &seed in &cfg.seeds {
        let settings = cfg
            .run_settings(workload.as_ref(), seed, None)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let trace = run(workload.as_ref(), &settings).map_err(sim_err)?;
        if let Some(message) = &trace.diverged {
            diverged += 1;
            first_divergence.get_or_insert_with(|| message.clone());
        }
        trace_paths.push(write_trace_file(&outdir, &trace)?);
        summaries.push(summarize(&cfg, &trace, metric_name));
    }
    append_summary_rows(&outdir, &summaries)?;
    if let Some(message) = first_divergence {
        return Err(CliError::Divergence(message));
    }
    Ok(RunOutput {
        outdir,
        summaries,
        trace_paths,
        diverged,
    })
}

pub struct SweepOutput {
    pub outdir: PathBuf,
    pub summaries: Vec<RunSummary>,
    pub slowdown: Vec<(String, Vec<SlowdownRow>)>,
    pub diverged: usize,
}

/// `stalesim sweep <cfg> [--jobs N]`: Cartesian product over the sweep
/// axes (staleness x workers x optimizers x depths), each cell run once
/// per seed; emits per-group normalized slowdown in `slowdown.csv`.
/// Diverged runs are recorded as omitted and the sweep continues.
pub fn cmd_sweep(cfg_path: &Path, jobs: usize) -> Result<SweepOutput, CliError> {
    let base = ExperimentConfig::from_file(cfg_path).map_err(|e| CliError::Config(e.to_string()))?;
    let outdir = PathBuf::from(&base.output_dir);
    fs::create_dir_all(&outdir)
        .map_err(|e| io_err(&format!("creating {}", outdir.display()), e))?;

    let dedup = |mut v: Vec<u64>| {
        let mut seen = std::collections::BTreeSet::new();
        v.retain(|x| seen.insert(*x));
        v
    };
    let depth_axis: Vec<Option<usize>> = if base.sweep.depths.is_empty() {
        vec![None]
    } else {
        dedup(base.sweep.depths.iter().map(|&d| d as u64).collect())
            .into_iter()
            .map(|d| Some(d as usize))
            .collect()
    };
    let opt_axis: Vec<Option<String>> = if base.sweep.optimizers.is_empty() {
        vec![None]
    } else {
        let mut seen = std::collections::BTreeSet::new();
        base.sweep
            .optimizers
            .iter()
            .filter(|k| seen.insert(k.to_string()))
            .map(|k| Some(k.clone()))
            .collect()
    };
    let worker_axis: Vec<usize> = if base.sweep.workers.is_empty() {
        vec![base.workers]
    } else {
        dedup(base.sweep.workers.iter().map(|&w| w as u64).collect())
            .into_iter()
            .map(|w| w as usize)
            .collect()
    };
    let staleness_axis: Vec<u32> = if base.sweep.staleness.is_empty() {
        vec![base.delay.staleness]
    } else {
        dedup(base.sweep.staleness.iter().map(|&s| u64::from(s)).collect())
            .into_iter()
            .map(|s| s as u32)
            .collect()
    };

    // Derive every cell configuration up front so axis errors surface as
    // config errors before any run starts.
    let mut cells: Vec<ExperimentConfig> = Vec::new();
    for depth in &depth_axis {
        for opt in &opt_axis {
            for &workers in &worker_axis {
                for &staleness in &staleness_axis {
                    let mut cfg = base.clone();
                    if let Some(d) = depth {
                        cfg = cfg.with_depth(*d).map_err(|e| CliError::Config(e.to_string()))?;
                    }
                    if let Some(kind) = opt {
                        cfg = cfg
                            .with_optimizer_kind(kind)
                            .map_err(|e| CliError::Config(e.to_string()))?;
                    }
                    cfg = cfg
                        .with_workers(workers)
                        .map_err(|e| CliError::Config(e.to_string()))?
                        .with_staleness(staleness)
                        .map_err(|e| CliError::Config(e.to_string()))?;
                    cells.push(cfg);
                }
            }
        }
    }

    let tasks: Vec<(usize, u64)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, cfg)| cfg.seeds.iter().map(move |&s| (i, s)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let results: Vec<(usize, u64, Result<RunTrace, CliError>)> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(cell, seed)| (cell, seed, execute_one(&cells[cell], seed, None)))
            .collect()
    });

    // Deterministic output order regardless of scheduling.
    let mut ordered = results;
    ordered.sort_by_key(|&(cell, seed, _)| (cell, seed));

    let mut summaries = Vec::new();
    let mut diverged = 0usize;
    for (cell, _seed, outcome) in ordered {
        let cfg = &cells[cell];
        match outcome {
            Ok(trace) => {
                if trace.diverged.is_some() {
                    diverged += 1;
                }
                write_trace_file(&outdir, &trace)?;
                let metric_name = default_metric_name(cfg);
                summaries.push(summarize(cfg, &trace, metric_name));
            }
            Err(CliError::Divergence(_)) => diverged += 1,
            Err(e) => return Err(e),
        }
    }
    append_summary_rows(&outdir, &summaries)?;

    let slowdown = slowdown_by_group(&summaries);
    write_slowdown_csv(&outdir, &slowdown)?;
    Ok(SweepOutput {
        outdir,
        summaries,
        slowdown,
        diverged,
    })
}

fn default_metric_name(cfg: &ExperimentConfig) -> &'static str {
    use stalesim_core::config::WorkloadCfg;
    match cfg.workload {
        WorkloadCfg::Dnn { .. } => "test_accuracy",
        WorkloadCfg::Vae { .. } => "test_loss",
        WorkloadCfg::Mf { .. } => "train_loss",
        WorkloadCfg::Lda { .. } => "log_likelihood",
        WorkloadCfg::Quadratic { .. } => "objective",
    }
}

/// Group summaries by configuration-minus-staleness and normalize each by
/// its staleness-0 mean. Groups without a converged baseline have every
/// level reported as omitted.
pub fn slowdown_by_group(summaries: &[RunSummary]) -> Vec<(String, Vec<SlowdownRow>)> {
    let mut groups: BTreeMap<String, Vec<RunSummary>> = BTreeMap::new();
    for s in summaries {
        groups.entry(s.group_key()).or_default().push(s.clone());
    }
    groups
        .into_iter()
        .map(|(key, group)| {
            let rows = match normalize_slowdown(&group) {
                Ok(rows) => rows,
                Err(MetricsError::MissingBaseline(_)) => {
                    let mut levels: Vec<u32> = group.iter().map(|s| s.staleness).collect();
                    levels.sort_unstable();
                    levels.dedup();
                    levels
                        .into_iter()
                        .map(|staleness| SlowdownRow {
                            staleness,
                            mean_ratio: None,
                            std_ratio: 0.0,
                            n: 0,
                            omitted: group.iter().filter(|s| s.staleness == staleness).count(),
                        })
                        .collect()
                }
                Err(_) => Vec::new(),
            };
            (key, rows)
        })
        .collect()
}

fn write_slowdown_csv(
    outdir: &Path,
    slowdown: &[(String, Vec<SlowdownRow>)],
) -> Result<(), CliError> {
    let path = outdir.join("slowdown.csv");
    let mut file =
        fs::File::create(&path).map_err(|e| io_err(&format!("creating {}", path.display()), e))?;
    writeln!(file, "{SLOWDOWN_HEADER}").map_err(|e| io_err("writing slowdown header", e))?;
    for (group, rows) in slowdown {
        for row in rows {
            writeln!(file, "{}", stalesim_core::metrics::slowdown_csv_row(group, row))
                .map_err(|e| io_err("writing slowdown row", e))?;
        }
    }
    Ok(())
}

pub struct TheoremOutput {
    pub outdir: PathBuf,
    pub report: VerificationReport,
}

/// `stalesim verify-theorem <cfg>`: run with the sqrt-decay stepsize
/// schedule and probe gradients, then check the convergence bound against
/// the recorded probes. Exit codes: 0 pass, 1 fail, 4 inconclusive
/// (negative coherence observed), 2 config error.
pub fn cmd_verify_theorem(cfg_path: &Path) -> Result<TheoremOutput, CliError> {
    let mut cfg =
        ExperimentConfig::from_file(cfg_path).map_err(|e| CliError::Config(e.to_string()))?;
    let theorem = cfg
        .theorem
        .clone()
        .ok_or_else(|| CliError::Config("verify-theorem needs theorem.mu".into()))?;
    cfg.probe.enabled = true;

    let outdir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&outdir)
        .map_err(|e| io_err(&format!("creating {}", outdir.display()), e))?;

    let workload = cfg
        .build_workload::<Real>()
        .map_err(|e| CliError::Config(e.to_string()))?;
    if workload.probe_gradient(&workload.init_params(&mut RngSet::new(0, 1).init)).is_none() {
        return Err(CliError::Config(format!(
            "workload {} does not support probe gradients",
            workload.label()
        )));
    }

    // Initial objective per seed; constants estimated at the first seed's
    // starting point when not supplied.
    let mut f0_values = Vec::new();
    let mut first_params = None;
    for &seed in &cfg.seeds {
        let mut rngs = RngSet::new(seed, cfg.workers);
        let params = workload.init_params(&mut rngs.init);
        let f0 = workload
            .probe_loss(&params)
            .expect("probe capability checked")
            .map_err(|e| CliError::Config(e.to_string()))?;
        f0_values.push(f0);
        first_params.get_or_insert(params);
    }
    let f0 = f0_values.iter().sum::<f64>() / f0_values.len() as f64;
    let x0 = first_params.expect("at least one seed");

    let lipschitz = match theorem.lipschitz {
        Some(l) => l,
        None if theorem.estimate => estimate_lipschitz(workload.as_ref(), &x0, theorem.power_iters, 91)
            .map_err(|e| CliError::Config(e.to_string()))?,
        None => {
            return Err(CliError::Config(
                "theorem.lipschitz missing and estimation disabled".into(),
            ))
        }
    };
    let batch = cfg
        .batch_size
        .unwrap_or_else(|| workload.default_batch_size(cfg.workers));
    let sigma_sq = match theorem.sigma_sq {
        Some(s) => s,
        None if theorem.estimate => {
            estimate_sigma_sq(workload.as_ref(), &x0, batch, theorem.var_samples, 92)
                .map_err(|e| CliError::Config(e.to_string()))?
        }
        None => {
            return Err(CliError::Config(
                "theorem.sigma_sq missing and estimation disabled".into(),
            ))
        }
    };

    let staleness = cfg.delay.staleness.max(1);
    let schedule = TheoremSchedule {
        mu: theorem.mu,
        staleness,
        lipschitz,
    };

    let mut probes_per_seed = Vec::new();
    let mut traces = Vec::new();
    for &seed in &cfg.seeds {
        let settings = cfg
            .run_settings(workload.as_ref(), seed, Some(schedule.clone()))
            .map_err(|e| CliError::Config(e.to_string()))?;
        let trace = run(workload.as_ref(), &settings).map_err(sim_err)?;
        if let Some(message) = &trace.diverged {
            return Err(CliError::Divergence(message.clone()));
        }
        probes_per_seed.push(trace.probes.clone());
        traces.push(trace);
    }

    let horizon = (cfg.budget / cfg.workers as u64).max(2);
    let params = TheoremParams {
        mu: theorem.mu,
        lipschitz,
        sigma_sq,
        staleness,
        f0,
        f_inf: theorem.f_inf,
        horizon,
    };
    let report = verify_bound(&probes_per_seed, &params)
        .map_err(|e| CliError::Config(e.to_string()))?;
    for trace in traces.iter_mut() {
        trace.report = Some(report.clone());
        write_trace_file(&outdir, trace)?;
    }
    Ok(TheoremOutput { outdir, report })
}

pub struct ProbeOutput {
    pub outdir: PathBuf,
    pub coherence_csv: PathBuf,
    pub traces: Vec<RunTrace>,
}

/// `stalesim probe <cfg>`: train while recording lagged gradient cosines;
/// emits `coherence.csv` with columns `iter,m,cosine,mu_k` (one row per
/// probe point and lag, seeds concatenated).
pub fn cmd_probe(cfg_path: &Path) -> Result<ProbeOutput, CliError> {
    let mut cfg =
        ExperimentConfig::from_file(cfg_path).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.probe.enabled = true;
    let outdir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&outdir)
        .map_err(|e| io_err(&format!("creating {}", outdir.display()), e))?;
    let workload = cfg
        .build_workload::<Real>()
        .map_err(|e| CliError::Config(e.to_string()))?;

    let mut traces = Vec::new();
    for &seed in &cfg.seeds {
        let settings = cfg
            .run_settings(workload.as_ref(), seed, None)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let trace = run(workload.as_ref(), &settings).map_err(sim_err)?;
        write_trace_file(&outdir, &trace)?;
        traces.push(trace);
    }

    let csv_path = outdir.join("coherence.csv");
    let mut file = fs::File::create(&csv_path)
        .map_err(|e| io_err(&format!("creating {}", csv_path.display()), e))?;
    writeln!(file, "iter,m,cosine,mu_k").map_err(|e| io_err("writing coherence header", e))?;
    for trace in &traces {
        for probe in &trace.probes {
            let mu = probe.mu.map_or_else(|| "nan".to_string(), |m| m.to_string());
            for &(lag, cosine) in &probe.cosines {
                writeln!(file, "{},{},{},{}", probe.iter, lag, cosine, mu)
                    .map_err(|e| io_err("writing coherence row", e))?;
            }
        }
    }
    Ok(ProbeOutput {
        outdir,
        coherence_csv: csv_path,
        traces,
    })
}

/// `stalesim report <outdir>`: recompute grouped normalized slowdown from
/// an existing `summary.csv`.
pub fn cmd_report(outdir: &Path) -> Result<Vec<(String, Vec<SlowdownRow>)>, CliError> {
    let path = outdir.join("summary.csv");
    let text = fs::read_to_string(&path)
        .map_err(|e| io_err(&format!("reading {}", path.display()), e))?;
    let mut summaries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line != SUMMARY_HEADER {
                return Err(CliError::Config(format!(
                    "{} has unexpected header {line:?}",
                    path.display()
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        summaries
            .push(parse_summary_row(line, lineno + 1).map_err(|e| CliError::Config(e.to_string()))?);
    }
    let slowdown = slowdown_by_group(&summaries);
    write_slowdown_csv(outdir, &slowdown)?;
    Ok(slowdown)
}

/// Re-read a trace written by one of the commands (testing helper).
pub fn load_trace(path: &Path) -> Result<RunTrace, CliError> {
    let file = fs::File::open(path).map_err(|e| io_err(&format!("opening {}", path.display()), e))?;
    read_trace(std::io::BufReader::new(file)).map_err(|e| CliError::Config(e.to_string()))
}
