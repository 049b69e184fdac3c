//! Lockstep simulation engine: per-iteration update generation, delayed
//! delivery into symmetric worker caches, and worker-0 evaluation.
//!
//! All workers advance together on one logical clock; an iteration is one
//! batch per worker. At the start of iteration t the arrivals due at t are
//! drained and added into their destination caches (in deterministic
//! order), then every worker computes on its own cache and schedules its
//! post-optimizer delta with freshly sampled per-destination delays
//! (including a delay to itself).

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::coherence::{CoherenceProbe, TheoremSchedule};
use crate::delay::{sample_iteration_delays, DelaySpec, TransitQueue, UpdateMsg};
use crate::metrics::{ConvergenceTarget, MetricsEvent, RunTrace};
use crate::optim::{OptimizerSpec, OptimizerState};
use crate::param::ParamVector;
use crate::scalar::{cast, Scalar};
use crate::workloads::{RawUpdate, Workload, WorkerLocal};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("non-finite value at iteration {iter}: {context}")]
    NonFinite { iter: u64, context: String },
}

/// Everything one simulation needs besides the workload itself.
#[derive(Clone, Debug)]
pub struct SimSettings {
    pub n_workers: usize,
    pub seed: u64,
    /// Batch units per worker per iteration.
    pub batch_size: usize,
    pub delay_spec: DelaySpec,
    /// Required for gradient workloads, forbidden for sampling ones.
    pub optimizer: Option<OptimizerSpec>,
    /// Replaces the optimizer's fixed learning rate by the sqrt-decay
    /// schedule (SGD only).
    pub lr_schedule: Option<TheoremSchedule>,
}

/// Trace-level knobs for a packaged run.
#[derive(Clone, Debug)]
pub struct RunSettings {
    pub sim: SimSettings,
    /// Total batch budget across all workers.
    pub budget_batches: u64,
    /// Evaluate every this many iterations.
    pub eval_interval: u64,
    pub probe: Option<ProbeSettings>,
    pub target: Option<ConvergenceTarget>,
    /// Stop at the first evaluation that satisfies the target.
    pub halt_on_target: bool,
    pub run_id: String,
    pub fingerprint: String,
    /// Reported staleness column for summaries (the uniform bound, or the
    /// mean-matched equivalent for geometric delays).
    pub staleness_label: u32,
}

#[derive(Clone, Debug)]
pub struct ProbeSettings {
    /// Iterations between probe gradients.
    pub interval: u64,
    /// Deepest lag (in probe steps) for cosine records.
    pub lags: u32,
    /// Coherence window in iterations; usually the staleness bound.
    pub window: u32,
}

/// Independent seeded random streams: parameter init, shard shuffle, delay
/// draws, and one stream per worker. Streams share the master seed and
/// differ in the stream index.
pub struct RngSet {
    pub init: ChaCha8Rng,
    pub shard: ChaCha8Rng,
    pub delay: ChaCha8Rng,
    pub workers: Vec<ChaCha8Rng>,
}

const STREAM_INIT: u64 = 0;
const STREAM_SHARD: u64 = 1;
const STREAM_DELAY: u64 = 2;
const STREAM_WORKER_BASE: u64 = 16;

impl RngSet {
    pub fn new(seed: u64, n_workers: usize) -> Self {
        let stream = |idx: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx);
            rng
        };
        Self {
            init: stream(STREAM_INIT),
            shard: stream(STREAM_SHARD),
            delay: stream(STREAM_DELAY),
            workers: (0..n_workers)
                .map(|p| stream(STREAM_WORKER_BASE + p as u64))
                .collect(),
        }
    }
}

/// Seeded shuffle then contiguous equal split; remainder goes to the last
/// shard.
pub fn make_shards(n_items: usize, n_workers: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut indices: Vec<usize> = (0..n_items).collect();
    indices.shuffle(rng);
    let base = n_items / n_workers;
    (0..n_workers)
        .map(|p| {
            let start = p * base;
            let end = if p + 1 == n_workers { n_items } else { start + base };
            indices[start..end].to_vec()
        })
        .collect()
}

/// One run's mutable state.
pub struct SimState<T: Scalar> {
    iter: u64,
    caches: Vec<ParamVector<T>>,
    queue: TransitQueue<T>,
    rngs: RngSet,
    opt_states: Vec<OptimizerState<T>>,
    locals: Vec<WorkerLocal>,
    shards: Vec<Vec<usize>>,
    settings: SimSettings,
    max_lag: u64,
    applied: Vec<u64>,
    last_batch_loss: Option<f64>,
}

impl<T: Scalar> SimState<T> {
    pub fn new(workload: &dyn Workload<T>, settings: SimSettings) -> Result<Self, SimError> {
        let p = settings.n_workers;
        if p < 1 {
            return Err(SimError::Config("need at least one worker".into()));
        }
        settings
            .delay_spec
            .validate(p)
            .map_err(|e| SimError::Config(e.to_string()))?;
        if workload.train_len() > 0 && workload.train_len() < p {
            return Err(SimError::Config(format!(
                "{} training units cannot cover {} workers",
                workload.train_len(),
                p
            )));
        }
        if settings.batch_size == 0 {
            return Err(SimError::Config("batch size must be >= 1".into()));
        }
        match (&settings.optimizer, workload.uses_optimizer()) {
            (None, true) => {
                return Err(SimError::Config(
                    "gradient workload needs an optimizer".into(),
                ))
            }
            (Some(spec), true) => {
                spec.validate().map_err(|e| SimError::Config(e.to_string()))?;
                if workload.sparse_updates() && !spec.is_stateless() {
                    return Err(SimError::Config(format!(
                        "sparse workload {} requires sgd, got {}",
                        workload.label(),
                        spec.kind_name()
                    )));
                }
            }
            (Some(_), false) => {
                return Err(SimError::Config(format!(
                    "workload {} does not use an optimizer",
                    workload.label()
                )))
            }
            (None, false) => {}
        }
        if settings.lr_schedule.is_some()
            && !matches!(settings.optimizer, Some(OptimizerSpec::Sgd { .. }))
        {
            return Err(SimError::Config(
                "the stepsize schedule applies to sgd only".into(),
            ));
        }

        let mut rngs = RngSet::new(settings.seed, p);
        let params0 = workload.init_params(&mut rngs.init);
        let shards = make_shards(workload.train_len(), p, &mut rngs.shard);

        let mut caches = vec![params0; p];
        let mut locals = Vec::with_capacity(p);
        let mut init_deltas = Vec::new();
        for (worker, shard) in shards.iter().enumerate() {
            let (local, delta) = workload.init_local(shard, &mut rngs.workers[worker]);
            locals.push(local);
            if let Some(delta) = delta {
                init_deltas.push(delta);
            }
        }
        // Every cache sees every worker's initial contribution, in worker
        // order, so caches start identical.
        for delta in &init_deltas {
            for cache in caches.iter_mut() {
                cache.add_delta(delta);
            }
        }

        let dim = workload.param_dim();
        let opt_states = match &settings.optimizer {
            Some(spec) => (0..p).map(|_| OptimizerState::new(spec, dim)).collect(),
            None => Vec::new(),
        };
        let max_lag = settings.delay_spec.max_lag();
        Ok(Self {
            iter: 0,
            caches,
            queue: TransitQueue::new(),
            rngs,
            opt_states,
            locals,
            shards,
            settings,
            max_lag,
            applied: vec![0; p],
            last_batch_loss: None,
        })
    }

    pub fn iter(&self) -> u64 {
        self.iter
    }

    pub fn cache(&self, worker: usize) -> &ParamVector<T> {
        &self.caches[worker]
    }

    pub fn locals(&self) -> &[WorkerLocal] {
        &self.locals
    }

    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    /// (scheduled, drained, applied-per-cache) counters for conservation
    /// checks.
    pub fn delivery_counts(&self) -> (u64, u64, &[u64]) {
        (
            self.queue.scheduled_count(),
            self.queue.drained_count(),
            &self.applied,
        )
    }

    /// Drain and apply every update due at the current iteration. Must run
    /// before `compute_and_schedule` each iteration.
    pub fn apply_arrivals(&mut self) {
        for (dst, msg) in self.queue.drain(self.iter) {
            let lag = self.iter - msg.gen_iter;
            assert!(
                lag >= 1 && lag <= self.max_lag,
                "arrival lag {lag} outside [1, {}] (gen {} at iter {})",
                self.max_lag,
                msg.gen_iter,
                self.iter
            );
            self.caches[dst].add_delta(&msg.delta);
            self.applied[dst] += 1;
        }
    }

    /// Each worker reads its cache, computes one batch update, transforms
    /// it through its optimizer state, and schedules it with fresh
    /// per-destination delays. Advances the clock by one.
    pub fn compute_and_schedule(&mut self, workload: &dyn Workload<T>) -> Result<(), SimError> {
        let p = self.settings.n_workers;
        let delays = sample_iteration_delays(&self.settings.delay_spec, p, &mut self.rngs.delay);
        let lr_override: Option<T> = self
            .settings
            .lr_schedule
            .as_ref()
            .map(|s| cast(s.stepsize(self.iter)));
        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;
        for worker in 0..p {
            let update = workload
                .batch_update(
                    &self.caches[worker],
                    &mut self.locals[worker],
                    &self.shards[worker],
                    self.settings.batch_size,
                    &mut self.rngs.workers[worker],
                )
                .map_err(|e| SimError::NonFinite {
                    iter: self.iter,
                    context: format!("worker {worker}: {e}"),
                })?;
            let delta = match update {
                RawUpdate::Gradient { grad, batch_loss } => {
                    loss_sum += batch_loss;
                    loss_count += 1;
                    self.opt_states[worker]
                        .apply_delta(&grad, lr_override)
                        .map_err(|e| SimError::NonFinite {
                            iter: self.iter,
                            context: format!("worker {worker} optimizer: {e}"),
                        })?
                }
                RawUpdate::Counts { delta } => delta,
            };
            self.queue.schedule(
                UpdateMsg {
                    source: worker,
                    gen_iter: self.iter,
                    delta: Arc::new(delta),
                },
                delays.row(worker),
            );
        }
        self.last_batch_loss = (loss_count > 0).then(|| loss_sum / loss_count as f64);
        self.iter += 1;
        Ok(())
    }

    /// Mean per-worker batch loss of the most recent iteration (absent for
    /// sampling workloads).
    pub fn last_batch_loss(&self) -> Option<f64> {
        self.last_batch_loss
    }

    /// Model quality on worker 0's cache; read-only.
    pub fn evaluate(&self, workload: &dyn Workload<T>) -> Result<f64, SimError> {
        workload
            .evaluate(&self.caches[0], &self.locals)
            .map_err(|e| SimError::NonFinite {
                iter: self.iter,
                context: e.to_string(),
            })
    }

    /// Apply everything still in flight (end-of-run accounting).
    pub fn flush_pending(&mut self) {
        for (dst, msg) in self.queue.drain_all() {
            self.caches[dst].add_delta(&msg.delta);
            self.applied[dst] += 1;
        }
    }
}

/// Execute a full run: initialize, iterate until the batch budget is
/// exhausted or the convergence target fires, evaluating every
/// `eval_interval` iterations. Numerical divergence is recorded in the
/// trace (which halts the run); configuration problems are errors.
pub fn run<T: Scalar>(
    workload: &dyn Workload<T>,
    settings: &RunSettings,
) -> Result<RunTrace, SimError> {
    let mut state = SimState::new(workload, settings.sim.clone())?;
    let p = settings.sim.n_workers as u64;
    let n_iters = settings.budget_batches / p;
    let metric = workload.quality_metric();

    let mut trace = RunTrace {
        run_id: settings.run_id.clone(),
        fingerprint: settings.fingerprint.clone(),
        workload: workload.label(),
        optimizer: settings
            .sim
            .optimizer
            .as_ref()
            .map_or_else(|| "none".to_string(), |o| o.kind_name().to_string()),
        staleness: settings.staleness_label,
        workers: settings.sim.n_workers,
        seed: settings.sim.seed,
        ..RunTrace::default()
    };

    let mut probe = match &settings.probe {
        Some(cfg) => {
            if workload.probe_gradient(state.cache(0)).is_none() {
                return Err(SimError::Config(format!(
                    "workload {} does not support probe gradients",
                    workload.label()
                )));
            }
            Some((cfg.clone(), CoherenceProbe::<T>::new(cfg.window, cfg.lags)))
        }
        None => None,
    };

    let record_eval = |state: &SimState<T>, trace: &mut RunTrace| -> Result<f64, SimError> {
        let value = state.evaluate(workload)?;
        trace.events.push(MetricsEvent {
            run_id: settings.run_id.clone(),
            batches_processed: state.iter() * p,
            metric: metric.name.to_string(),
            value,
        });
        Ok(value)
    };
    let take_probe = |state: &SimState<T>,
                      probe: &mut Option<(ProbeSettings, CoherenceProbe<T>)>,
                      trace: &mut RunTrace|
     -> Result<(), SimError> {
        if let Some((_, ring)) = probe.as_mut() {
            let grad = workload
                .probe_gradient(state.cache(0))
                .expect("probe capability checked at init")
                .map_err(|e| SimError::NonFinite {
                    iter: state.iter(),
                    context: format!("probe: {e}"),
                })?;
            trace.probes.push(ring.observe(state.iter(), grad));
        }
        Ok(())
    };

    // Initial evaluation and probe at iteration 0.
    let mut outcome: Result<(), SimError> = (|| {
        let value = record_eval(&state, &mut trace)?;
        take_probe(&state, &mut probe, &mut trace)?;
        if let Some(target) = &settings.target {
            if settings.halt_on_target && target.metric == metric.name && target.satisfied(value) {
                return Ok(());
            }
        }
        for i in 0..n_iters {
            state.apply_arrivals();
            if i > 0 {
                if let Some((cfg, _)) = &probe {
                    if i % cfg.interval == 0 {
                        take_probe(&state, &mut probe, &mut trace)?;
                    }
                }
                if i % settings.eval_interval == 0 {
                    let value = record_eval(&state, &mut trace)?;
                    if let Some(target) = &settings.target {
                        if settings.halt_on_target
                            && target.metric == metric.name
                            && target.satisfied(value)
                        {
                            return Ok(());
                        }
                    }
                }
            }
            state.compute_and_schedule(workload)?;
            if let Some(loss) = state.last_batch_loss() {
                trace.events.push(MetricsEvent {
                    run_id: settings.run_id.clone(),
                    batches_processed: state.iter() * p,
                    metric: "batch_loss".to_string(),
                    value: loss,
                });
            }
        }
        if n_iters > 0 {
            state.apply_arrivals();
            if let Some((cfg, _)) = &probe {
                if state.iter() % cfg.interval == 0 {
                    take_probe(&state, &mut probe, &mut trace)?;
                }
            }
            record_eval(&state, &mut trace)?;
        }
        Ok(())
    })();

    if let Err(SimError::Config(_)) = outcome {
        // Configuration failures abort before producing a trace.
        return Err(outcome.unwrap_err());
    }
    if let Err(SimError::NonFinite { iter, context }) = &outcome {
        trace.diverged = Some(format!(
            "run {} diverged at iteration {iter}: {context}",
            settings.run_id
        ));
        outcome = Ok(());
    }
    outcome?;
    trace.batches_total = state.iter() * p;
    Ok(trace)
}
