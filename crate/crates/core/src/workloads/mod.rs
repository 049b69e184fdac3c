//! The model families driven by the simulator: matrix factorization via
//! SGD, LDA via collapsed Gibbs sampling, feed-forward classifiers (MLR is
//! depth 0), variational autoencoders via reparameterized black-box VI, and
//! a quadratic objective for bound verification.

pub mod data;
pub mod dnn;
pub mod lda;
pub mod mf;
pub mod nn;
pub mod quadratic;
pub mod vae;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::param::{ParamDelta, ParamVector};
use crate::scalar::Scalar;

pub use data::{ClassificationData, Corpus, DataError, RatingsData};
pub use dnn::{DnnWorkload, NetSpec};
pub use lda::{LdaLocal, LdaWorkload};
pub use mf::MfWorkload;
pub use quadratic::QuadraticWorkload;
pub use vae::{VaeSpec, VaeWorkload};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
}

/// What a worker produced on one batch.
pub enum RawUpdate<T> {
    /// A gradient to be transformed by the worker's optimizer.
    Gradient { grad: ParamDelta<T>, batch_loss: f64 },
    /// A ready-to-apply count delta (Gibbs sampling); bypasses optimizers.
    Counts { delta: ParamDelta<T> },
}

/// Worker-local non-shared state. Only sampling workloads carry any.
pub enum WorkerLocal {
    None,
    Lda(LdaLocal),
}

/// The model-quality metric a workload reports from evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QualityMetric {
    pub name: &'static str,
    pub higher_is_better: bool,
}

/// Abstract interface: initialize parameters, draw a batch from a worker
/// shard, compute an update, evaluate model quality.
pub trait Workload<T: Scalar>: Send + Sync {
    /// Short label used in run ids and sweep group names, e.g. `dnn-d3`.
    fn label(&self) -> String;

    fn param_dim(&self) -> usize;

    /// Number of shardable training units (examples, observed cells, or
    /// documents). Zero means the workload needs no data partitioning.
    fn train_len(&self) -> usize;

    fn quality_metric(&self) -> QualityMetric;

    fn default_batch_size(&self, n_workers: usize) -> usize;

    fn init_params(&self, rng: &mut ChaCha8Rng) -> ParamVector<T>;

    /// Build worker-local state for a shard. The optional delta is the
    /// worker's contribution to the shared initial parameters (LDA initial
    /// counts); it is applied to every cache before the first iteration.
    fn init_local(
        &self,
        shard: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> (WorkerLocal, Option<ParamDelta<T>>);

    /// One batch of work against a read-only cache view.
    fn batch_update(
        &self,
        params: &ParamVector<T>,
        local: &mut WorkerLocal,
        shard: &[usize],
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<RawUpdate<T>, WorkloadError>;

    /// Model quality on worker 0's cache; read-only. Sampling workloads
    /// additionally read every worker's local state.
    fn evaluate(&self, params: &ParamVector<T>, locals: &[WorkerLocal])
        -> Result<f64, WorkloadError>;

    /// Exact mean gradient over the workload's fixed probe subset, or None
    /// if the workload has no gradient (sampling).
    fn probe_gradient(&self, params: &ParamVector<T>) -> Option<Result<ParamVector<T>, WorkloadError>>;

    /// Objective value over the same probe subset (the F whose gradient
    /// `probe_gradient` returns); None for sampling workloads.
    fn probe_loss(&self, params: &ParamVector<T>) -> Option<Result<f64, WorkloadError>>;

    /// Whether updates pass through an optimizer (false for Gibbs counts).
    fn uses_optimizer(&self) -> bool {
        true
    }

    /// Whether batch updates are sparse (restricts the optimizer to SGD).
    fn sparse_updates(&self) -> bool {
        false
    }
}

/// One standard-normal f64 draw (scalar conversion happens at the caller).
pub(crate) fn std_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
}

/// Walk the cumulative weights; `u` is uniform in [0, 1).
pub(crate) fn categorical_from_weights(weights: &[f64], total: f64, u: f64) -> usize {
    let threshold = u * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if threshold < acc {
            return i;
        }
    }
    weights.len() - 1
}
