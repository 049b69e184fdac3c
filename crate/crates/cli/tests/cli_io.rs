//! End-to-end behavior of the stalesim binary and command library: exit
//! codes, output files, sweep enumeration, and format round-trips.

use std::path::{Path, PathBuf};
use std::process::Command;

use stalesim::{cmd_probe, cmd_report, cmd_run, cmd_sweep};
use stalesim_core::config::ExperimentConfig;
use stalesim_core::metrics::{parse_summary_row, SLOWDOWN_HEADER, SUMMARY_HEADER};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stalesim"))
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn mlr_cfg(outdir: &Path, extra: &str) -> String {
    format!(
        "workload.kind = mlr\n\
         data.source = synthetic\n\
         data.classes = 2\n\
         data.features = 6\n\
         data.train = 200\n\
         data.test = 80\n\
         data.separation = 3.0\n\
         data.noise = 0.5\n\
         optimizer.kind = sgd\n\
         optimizer.lr = 0.05\n\
         run.workers = 2\n\
         run.seeds = 0,1,2\n\
         run.batch_size = 8\n\
         run.budget = 400\n\
         run.eval_interval = 5\n\
         output.dir = {}\n\
         {extra}",
        outdir.display()
    )
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let out = bin().arg("run").arg("/nonexistent/stalesim.cfg").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/nonexistent/stalesim.cfg"), "{stderr}");
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "bad.cfg", "workload.kind = mlr\nworkload.depht = 1\n");
    let out = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_writes_one_trace_per_seed_plus_summary() {
    let dir = tempfile::tempdir().unwrap();
    let outdir = dir.path().join("out");
    let cfg = write_cfg(dir.path(), "run.cfg", &mlr_cfg(&outdir, ""));
    let result = cmd_run(&cfg).unwrap();
    assert_eq!(result.trace_paths.len(), 3);
    for p in &result.trace_paths {
        assert!(p.exists());
    }
    let summary = std::fs::read_to_string(outdir.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], SUMMARY_HEADER);
    assert_eq!(lines.len(), 4);
    for (i, line) in lines[1..].iter().enumerate() {
        let row = parse_summary_row(line, i + 2).unwrap();
        assert_eq!(row.workload, "mlr");
        assert_eq!(row.workers, 2);
    }
}

#[test]
fn same_config_and_seed_produce_byte_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let cfg_a = write_cfg(dir.path(), "a.cfg", &mlr_cfg(&out_a, "delay.staleness = 4\n"));
    let cfg_b = write_cfg(dir.path(), "b.cfg", &mlr_cfg(&out_b, "delay.staleness = 4\n"));
    let ra = cmd_run(&cfg_a).unwrap();
    let rb = cmd_run(&cfg_b).unwrap();
    for (pa, pb) in ra.trace_paths.iter().zip(&rb.trace_paths) {
        // The run id (and so the file name) depends only on config + seed,
        // not the output directory.
        assert_eq!(pa.file_name(), pb.file_name());
        let ba = std::fs::read(pa).unwrap();
        let bb = std::fs::read(pb).unwrap();
        assert_eq!(ba, bb, "trace bytes differ for {:?}", pa.file_name());
    }
}

#[test]
fn budget_zero_trace_contains_only_the_initial_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let outdir = dir.path().join("out");
    let cfg = write_cfg(
        dir.path(),
        "zero.cfg",
        &mlr_cfg(&outdir, "").replace("run.budget = 400", "run.budget = 0"),
    );
    let result = cmd_run(&cfg).unwrap();
    let trace = stalesim::load_trace(&result.trace_paths[0]).unwrap();
    assert_eq!(trace.events.len(), 1);
    assert_eq!(trace.events[0].batches_processed, 0);
    assert_eq!(trace.events[0].metric, "test_accuracy");
}

#[test]
fn numerical_divergence_exits_3_and_marks_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let outdir = dir.path().join("out");
    let body = format!(
        "workload.kind = mf\n\
         workload.rank = 3\n\
         data.source = synthetic\n\
         data.rows = 30\n\
         data.cols = 30\n\
         data.observed = 400\n\
         data.noise = 0.1\n\
         optimizer.kind = sgd\n\
         optimizer.lr = 50.0\n\
         run.workers = 2\n\
         run.seeds = 0\n\
         run.batch_size = 50\n\
         run.budget = 2000\n\
         run.eval_interval = 5\n\
         output.dir = {}\n",
        outdir.display()
    );
    let cfg = write_cfg(dir.path(), "div.cfg", &body);
    let out = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    // The trace is still written, with a divergence marker line.
    let trace_file = std::fs::read_dir(&outdir)
        .unwrap()
        .filter_map(Result::ok)
        .find(|e| e.path().extension().is_some_and(|x| x == "jsonl"))
        .expect("trace file written");
    let trace = stalesim::load_trace(&trace_file.path()).unwrap();
    assert!(trace.diverged.is_some());
}

#[test]
fn sweep_emits_every_cell_exactly_once() {
    let dir = tempfile::tempdir().unwrap();
    let outdir = dir.path().join("out");
    let cfg = write_cfg(
        dir.path(),
        "sweep.cfg",
        &mlr_cfg(
            &outdir,
            "target.threshold = 0.9\nsweep.staleness = 0,2\nsweep.workers = 1,2\nrun.seeds = 0\n",
        )
        .replace("run.seeds = 0,1,2\n", ""),
    );
    let out = cmd_sweep(&cfg, 2).unwrap();
    assert_eq!(out.summaries.len(), 4); // 2 staleness x 2 workers x 1 seed
    let slowdown = std::fs::read_to_string(outdir.join("slowdown.csv")).unwrap();
    let lines: Vec<&str> = slowdown.lines().collect();
    assert_eq!(lines[0], SLOWDOWN_HEADER);
    assert_eq!(lines.len(), 5); // 2 groups x 2 staleness levels
    // Baseline rows are exactly 1.0.
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        if fields[1] == "0" {
            assert_eq!(fields[2].parse::<f64>().unwrap(), 1.0);
        }
    }
    // Each (group, staleness) cell appears exactly once.
    let mut cells: Vec<(String, String)> = lines[1..]
        .iter()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].to_string())
        })
        .collect();
    cells.sort();
    cells.dedup();
    assert_eq!(cells.len(), 4);
}

#[test]
fn report_recomputes_slowdown_from_summary() {
    let dir = tempfile::tempdir().unwrap();
    let outdir = dir.path().join("out");
    let cfg = write_cfg(
        dir.path(),
        "sweep.cfg",
        &mlr_cfg(&outdir, "target.threshold = 0.9\nsweep.staleness = 0,2\n"),
    );
    cmd_sweep(&cfg, 1).unwrap();
    let original = std::fs::read_to_string(outdir.join("slowdown.csv")).unwrap();
    std::fs::remove_file(outdir.join("slowdown.csv")).unwrap();
    let groups = cmd_report(&outdir).unwrap();
    assert_eq!(groups.len(), 1);
    let recomputed = std::fs::read_to_string(outdir.join("slowdown.csv")).unwrap();
    assert_eq!(original, recomputed);
}

#[test]
fn probe_emits_coherence_csv_with_stated_columns() {
    let dir = tempfile::tempdir().unwrap();
    let outdir = dir.path().join("out");
    let cfg = write_cfg(
        dir.path(),
        "probe.cfg",
        &mlr_cfg(
            &outdir,
            "delay.staleness = 2\nprobe.interval = 1\nprobe.lags = 3\nprobe.subset = 100\n",
        ),
    );
    let out = cmd_probe(&cfg).unwrap();
    let text = std::fs::read_to_string(&out.coherence_csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iter,m,cosine,mu_k");
    assert!(lines.len() > 10);
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 4);
        let m: u32 = fields[1].parse().unwrap();
        assert!((1..=3).contains(&m));
        let cosine: f64 = fields[2].parse().unwrap();
        assert!((-1.0..=1.0).contains(&cosine));
    }
}

#[test]
fn verify_theorem_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let quad = |name: &str, theorem: &str| -> PathBuf {
        write_cfg(
            dir.path(),
            name,
            &format!(
                "workload.kind = quadratic\n\
                 workload.dim = 12\n\
                 workload.eig_min = 0.1\n\
                 workload.eig_max = 1.0\n\
                 optimizer.kind = sgd\n\
                 delay.staleness = 4\n\
                 run.workers = 2\n\
                 run.seeds = 0\n\
                 run.budget = 4000\n\
                 run.eval_interval = 500\n\
                 probe.enabled = true\n\
                 probe.interval = 10\n\
                 probe.lags = 3\n\
                 output.dir = {}\n\
                 {theorem}",
                dir.path().join(name.replace(".cfg", "_out")).display()
            ),
        )
    };

    // Sound constants: the bound holds.
    let pass_cfg = quad(
        "pass.cfg",
        "theorem.mu = 0.9\ntheorem.lipschitz = 1.0\ntheorem.sigma_sq = 0.0\ntheorem.f_inf = 0.0\ntheorem.estimate = false\n",
    );
    let out = bin().arg("verify-theorem").arg(&pass_cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("verdict = pass"), "{stdout}");

    // Missing Lipschitz constant with estimation disabled: config error.
    let missing_cfg = quad("missing.cfg", "theorem.mu = 0.9\ntheorem.estimate = false\n");
    let out = bin().arg("verify-theorem").arg(&missing_cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Overclaimed coherence on a noisy objective: fail (1) or, when
    // negative coherence shows up, inconclusive (4).
    let adv = write_cfg(
        dir.path(),
        "adv.cfg",
        &format!(
            "workload.kind = mlr\n\
             data.source = synthetic\n\
             data.classes = 4\n\
             data.features = 20\n\
             data.train = 1000\n\
             data.test = 200\n\
             data.separation = 0.0\n\
             data.noise = 1.2\n\
             optimizer.kind = sgd\n\
             delay.staleness = 4\n\
             run.workers = 2\n\
             run.seeds = 0\n\
             run.batch_size = 8\n\
             run.budget = 2000\n\
             run.eval_interval = 200\n\
             probe.enabled = true\n\
             probe.interval = 5\n\
             probe.lags = 4\n\
             probe.subset = 500\n\
             theorem.mu = 50.0\n\
             theorem.lipschitz = 1.0\n\
             theorem.sigma_sq = 0.0\n\
             theorem.f_inf = 0.0\n\
             theorem.estimate = false\n\
             output.dir = {}\n",
            dir.path().join("adv_out").display()
        ),
    );
    let out = bin().arg("verify-theorem").arg(&adv).output().unwrap();
    let code = out.status.code().unwrap();
    assert!(code == 1 || code == 4, "expected 1 or 4, got {code}");
}

#[test]
fn geometric_delay_run_completes_with_derived_p_fast() {
    let dir = tempfile::tempdir().unwrap();
    let outdir = dir.path().join("out");
    let cfg = write_cfg(
        dir.path(),
        "geo.cfg",
        &mlr_cfg(
            &outdir,
            "delay.kind = geometric\ndelay.staleness = 8\ndelay.p_straggler = 0.2\ndelay.stragglers = 1\ndelay.cap = 50\n",
        ),
    );
    let out = cmd_run(&cfg).unwrap();
    assert_eq!(out.diverged, 0);
    let trace = stalesim::load_trace(&out.trace_paths[0]).unwrap();
    assert_eq!(trace.staleness, 8); // the mean-matched label
    assert!(trace.batches_total > 0);
}

#[test]
fn canonical_config_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let outdir = dir.path().join("out");
    let original = write_cfg(
        dir.path(),
        "orig.cfg",
        &mlr_cfg(&outdir, "target.threshold = 0.9\nsweep.staleness = 0,4,8\n"),
    );
    let parsed = ExperimentConfig::from_file(&original).unwrap();
    let canon_path = write_cfg(dir.path(), "canon.cfg", &parsed.canonical_kv());
    let reparsed = ExperimentConfig::from_file(&canon_path).unwrap();
    assert_eq!(parsed, reparsed);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "cfg") {
            ExperimentConfig::from_file(&path)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 8, "expected the shipped config set, found {n}");
}

#[test]
fn lda_run_reports_log_likelihood() {
    let dir = tempfile::tempdir().unwrap();
    let outdir = dir.path().join("out");
    let body = format!(
        "workload.kind = lda\n\
         workload.topics = 4\n\
         data.source = synthetic\n\
         data.docs = 80\n\
         data.vocab = 60\n\
         data.doc_len = 20\n\
         data.gen_topics = 4\n\
         delay.staleness = 3\n\
         run.workers = 4\n\
         run.seeds = 0\n\
         run.budget = 200\n\
         run.eval_interval = 5\n\
         output.dir = {}\n",
        outdir.display()
    );
    let cfg = write_cfg(dir.path(), "lda.cfg", &body);
    let out = cmd_run(&cfg).unwrap();
    let trace = stalesim::load_trace(&out.trace_paths[0]).unwrap();
    let series = trace.series("log_likelihood");
    assert!(series.len() > 2);
    // Gibbs likelihood rises from the random initialization.
    assert!(series.last().unwrap().1 > series.first().unwrap().1);
}
