use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stalesim::{cmd_probe, cmd_report, cmd_run, cmd_sweep, cmd_verify_theorem, CliError};

/// Deterministic simulator of data-parallel training under bounded update
/// staleness.
#[derive(Parser)]
#[command(name = "stalesim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one run per seed and record traces plus summary rows.
    Run { config: PathBuf },
    /// Run the Cartesian sweep axes and emit normalized slowdown tables.
    Sweep {
        config: PathBuf,
        /// Parallel sweep cells (0 = one per logical cpu).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train with the sqrt-decay schedule and check the convergence bound.
    VerifyTheorem { config: PathBuf },
    /// Record lagged gradient cosine similarity along training.
    Probe { config: PathBuf },
    /// Recompute grouped slowdown from an existing summary.csv.
    Report { outdir: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config } => match cmd_run(&config) {
            Ok(out) => {
                for s in &out.summaries {
                    let batches = s
                        .batches_to_target
                        .map_or_else(|| "not_reached".into(), |b: u64| b.to_string());
                    println!(
                        "run {} seed {} final {} = {:.6} batches_to_target = {}",
                        s.run_id,
                        s.seed,
                        trace_metric_name(&s.workload),
                        s.final_metric,
                        batches
                    );
                }
                println!("wrote {} traces to {}", out.trace_paths.len(), out.outdir.display());
                0
            }
            Err(e) => fail(e),
        },
        Command::Sweep { config, jobs } => match cmd_sweep(&config, jobs) {
            Ok(out) => {
                println!(
                    "sweep complete: {} runs ({} diverged), outputs in {}",
                    out.summaries.len(),
                    out.diverged,
                    out.outdir.display()
                );
                print_slowdown(&out.slowdown);
                0
            }
            Err(e) => fail(e),
        },
        Command::VerifyTheorem { config } => match cmd_verify_theorem(&config) {
            Ok(out) => {
                let r = &out.report;
                println!("bound = {}", r.bound);
                println!("min_grad_norm_sq = {}", r.min_grad_norm_sq);
                println!("mu_min = {}", r.mu_min);
                println!("mu_mean = {}", r.mu_mean);
                println!("negative_mu_fraction = {}", r.negative_mu_fraction);
                println!("n_probes = {}", r.n_probes);
                println!("seeds = {}", r.seeds);
                println!("f0 = {}", r.f0);
                let verdict = if r.pass {
                    "pass"
                } else if r.inconclusive {
                    "inconclusive"
                } else {
                    "fail"
                };
                println!("verdict = {verdict}");
                if r.pass {
                    0
                } else if r.inconclusive {
                    4
                } else {
                    1
                }
            }
            Err(e) => fail(e),
        },
        Command::Probe { config } => match cmd_probe(&config) {
            Ok(out) => {
                println!("coherence table: {}", out.coherence_csv.display());
                0
            }
            Err(e) => fail(e),
        },
        Command::Report { outdir } => match cmd_report(&outdir) {
            Ok(slowdown) => {
                print_slowdown(&slowdown);
                0
            }
            Err(e) => fail(e),
        },
    };
    ExitCode::from(code as u8)
}

fn fail(e: CliError) -> i32 {
    eprintln!("{e}");
    e.exit_code()
}

fn trace_metric_name(workload: &str) -> &'static str {
    if workload.starts_with("mlr") || workload.starts_with("dnn") {
        "test_accuracy"
    } else if workload.starts_with("vae") {
        "test_loss"
    } else if workload.starts_with("mf") {
        "train_loss"
    } else if workload.starts_with("lda") {
        "log_likelihood"
    } else {
        "objective"
    }
}

fn print_slowdown(slowdown: &[(String, Vec<stalesim_core::metrics::SlowdownRow>)]) {
    for (group, rows) in slowdown {
        for row in rows {
            let ratio = row
                .mean_ratio
                .map_or_else(|| "omitted".into(), |r: f64| format!("{r:.4}"));
            println!(
                "group {group} s={} ratio={} std={:.4} n={} omitted={}",
                row.staleness, ratio, row.std_ratio, row.n, row.omitted
            );
        }
    }
}
