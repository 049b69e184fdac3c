//! Gradient-coherence probe and the convergence-bound machinery for
//! asynchronous SGD: stepsize schedule, bound evaluation, optimal staleness,
//! and verification of the bound against recorded probe gradients.
//!
//! The coherence at iteration k is the minimum of
//! <grad F(x_k), grad F(x_t)> / |grad F(x_k)|^2 over the window
//! k-s+1 <= t <= k; the t = k term makes the window never empty at probe
//! resolution. Full gradients are approximated by gradients on a fixed
//! probe subset of training samples.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::param::ParamVector;
use crate::scalar::{cast, Scalar};
use crate::workloads::{RawUpdate, Workload, WorkerLocal};

#[derive(Debug, Error)]
pub enum CoherenceError {
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("no probe gradients cover the coherence window ending at {0}")]
    InsufficientHistory(u64),
    #[error("run recorded no probe gradients")]
    MissingProbes,
    #[error("{0}")]
    Invalid(String),
}

/// sim(a, b) = a.b / (|a| |b|), clamped into [-1, 1] against rounding.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<f64, CoherenceError> {
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x.to_f64().unwrap() * y.to_f64().unwrap())
        .sum();
    let na: f64 = a.iter().map(|&x| x.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(CoherenceError::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Minimum over t in [k-s+1, k] (at the available probe resolution) of
/// <g_k, g_t> / |g_k|^2, together with the t attaining it. `history` must
/// contain the entry stamped k.
pub fn gradient_coherence<T: Scalar>(
    history: &[(u64, ParamVector<T>)],
    k: u64,
    staleness: u32,
) -> Result<(f64, u64), CoherenceError> {
    let current = history
        .iter()
        .find(|(iter, _)| *iter == k)
        .map(|(_, g)| g)
        .ok_or(CoherenceError::InsufficientHistory(k))?;
    let norm_sq = current.norm_sq().to_f64().unwrap();
    if norm_sq == 0.0 {
        return Err(CoherenceError::ZeroVector);
    }
    let window_start = k.saturating_sub(u64::from(staleness.max(1)) - 1);
    let mut best: Option<(f64, u64)> = None;
    for (t, g) in history {
        if *t < window_start || *t > k {
            continue;
        }
        let value = current.dot(g).to_f64().unwrap() / norm_sq;
        if best.is_none_or(|(b, _)| value < b) {
            best = Some((value, *t));
        }
    }
    best.ok_or(CoherenceError::InsufficientHistory(k))
}

/// Stepsize eta_k = mu / (s L sqrt(k+1)); shifted by one so the schedule is
/// defined at k = 0.
pub fn theorem_stepsize(k: u64, mu: f64, staleness: u32, lipschitz: f64) -> f64 {
    assert!(mu > 0.0 && lipschitz > 0.0 && staleness >= 1);
    mu / (f64::from(staleness) * lipschitz * ((k + 1) as f64).sqrt())
}

/// The sqrt-decay schedule a run uses when verifying the bound.
#[derive(Clone, Debug, PartialEq)]
pub struct TheoremSchedule {
    pub mu: f64,
    pub staleness: u32,
    pub lipschitz: f64,
}

impl TheoremSchedule {
    pub fn stepsize(&self, k: u64) -> f64 {
        theorem_stepsize(k, self.mu, self.staleness, self.lipschitz)
    }
}

/// Constants of the convergence bound.
#[derive(Clone, Debug, PartialEq)]
pub struct TheoremParams {
    /// Lower bound on the gradient coherence (> 0).
    pub mu: f64,
    /// Lipschitz constant of the gradient.
    pub lipschitz: f64,
    /// Variance bound of the stochastic gradients.
    pub sigma_sq: f64,
    /// Maximum staleness (>= 1).
    pub staleness: u32,
    /// Initial objective value.
    pub f0: f64,
    /// Lower bound on the objective.
    pub f_inf: f64,
    /// Iteration horizon (>= 2 so log T > 0).
    pub horizon: u64,
}

impl TheoremParams {
    pub fn validate(&self) -> Result<(), CoherenceError> {
        if self.mu <= 0.0
            || self.lipschitz <= 0.0
            || self.sigma_sq < 0.0
            || self.staleness < 1
            || self.f0 < self.f_inf
            || self.horizon < 2
        {
            return Err(CoherenceError::Invalid(format!(
                "theorem parameters out of range: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Bound on min_k E |grad F(x_k)|^2:
/// ( s L (F0 - Finf) / mu^2 + sigma^2 ln T / s ) / sqrt(T).
pub fn theorem_bound(p: &TheoremParams) -> f64 {
    theorem_bound_at(p, f64::from(p.staleness))
}

/// Same bound evaluated at an arbitrary (real) staleness, for grid scans.
pub fn theorem_bound_at(p: &TheoremParams, s: f64) -> f64 {
    let t = p.horizon as f64;
    (s * p.lipschitz * (p.f0 - p.f_inf) / (p.mu * p.mu) + p.sigma_sq * t.ln() / s) / t.sqrt()
}

/// The staleness minimizing the bound:
/// s* = sigma mu sqrt(ln T / (L (F0 - Finf))).
pub fn optimal_staleness(p: &TheoremParams) -> f64 {
    let t = p.horizon as f64;
    p.sigma_sq.sqrt() * p.mu * (t.ln() / (p.lipschitz * (p.f0 - p.f_inf))).sqrt()
}

/// One probe observation: squared gradient norm, coherence over the
/// staleness window, and cosine similarity against each configured lag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub iter: u64,
    pub grad_norm_sq: f64,
    /// None when the probe gradient was exactly zero.
    pub mu: Option<f64>,
    pub mu_argmin: Option<u64>,
    /// (lag in probe steps, cosine to the gradient that many probes back).
    pub cosines: Vec<(u32, f64)>,
}

/// Rolling window of recent probe gradients and the derived records.
pub struct CoherenceProbe<T> {
    history: VecDeque<(u64, ParamVector<T>)>,
    capacity: usize,
    lags: u32,
    window: u32,
}

impl<T: Scalar> CoherenceProbe<T> {
    pub fn new(window_staleness: u32, lags: u32) -> Self {
        let window = window_staleness.max(1);
        // Hold enough probes to cover both the coherence window and the
        // deepest requested lag.
        let capacity = (window.max(10) as usize).max(lags as usize) + 1;
        Self {
            history: VecDeque::with_capacity(capacity),
            capacity,
            lags,
            window,
        }
    }

    /// Ingest the probe gradient at iteration `iter` and derive its record.
    pub fn observe(&mut self, iter: u64, grad: ParamVector<T>) -> ProbeRecord {
        let grad_norm_sq = grad.norm_sq().to_f64().unwrap();
        let mut cosines = Vec::new();
        for lag in 1..=self.lags {
            let Some(idx) = self.history.len().checked_sub(lag as usize) else {
                break;
            };
            let (_, past) = &self.history[idx];
            if let Ok(cos) = cosine_similarity(grad.as_slice(), past.as_slice()) {
                cosines.push((lag, cos));
            }
        }
        self.history.push_back((iter, grad));
        if self.history.len() > self.capacity {
            self.history.pop_front();
        }
        let slice: Vec<(u64, ParamVector<T>)> = self.history.iter().cloned().collect();
        let (mu, mu_argmin) = match gradient_coherence(&slice, iter, self.window) {
            Ok((mu, t)) => (Some(mu), Some(t)),
            Err(_) => (None, None),
        };
        ProbeRecord {
            iter,
            grad_norm_sq,
            mu,
            mu_argmin,
            cosines,
        }
    }
}

/// Outcome of checking the bound against one configuration's probe runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub bound: f64,
    /// min over probed iterations of the seed-averaged |grad F(x_k)|^2.
    pub min_grad_norm_sq: f64,
    pub pass: bool,
    /// Set when the check failed but negative coherence was observed, which
    /// weakens the bound's assumptions rather than refuting it.
    pub inconclusive: bool,
    pub mu_min: f64,
    pub mu_mean: f64,
    pub negative_mu_fraction: f64,
    pub n_probes: usize,
    pub seeds: usize,
    pub f0: f64,
}

/// Estimate the gradient Lipschitz constant as the largest Hessian
/// eigenvalue of the probe objective at `params`, by power iteration on
/// central-difference Hessian-vector products. An estimate, not a bound;
/// quadratic workloads should supply their exact constant instead.
pub fn estimate_lipschitz<T: Scalar>(
    workload: &dyn Workload<T>,
    params: &ParamVector<T>,
    power_iters: usize,
    seed: u64,
) -> Result<f64, CoherenceError> {
    let probe = |x: &ParamVector<T>| -> Result<ParamVector<T>, CoherenceError> {
        workload
            .probe_gradient(x)
            .ok_or_else(|| CoherenceError::Invalid("workload has no probe gradient".into()))?
            .map_err(|e| CoherenceError::Invalid(e.to_string()))
    };
    let dim = params.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= norm;
    }
    let eps = 1e-4;
    let mut lambda = 0.0;
    for _ in 0..power_iters.max(1) {
        let shift = |sign: f64| -> ParamVector<T> {
            let values = params
                .as_slice()
                .iter()
                .zip(&v)
                .map(|(&p, &vi)| p + cast::<T>(sign * eps * vi))
                .collect();
            ParamVector::from_vec(values)
        };
        let g_plus = probe(&shift(1.0))?;
        let g_minus = probe(&shift(-1.0))?;
        let hv: Vec<f64> = g_plus
            .as_slice()
            .iter()
            .zip(g_minus.as_slice())
            .map(|(&a, &b)| (a.to_f64().unwrap() - b.to_f64().unwrap()) / (2.0 * eps))
            .collect();
        lambda = hv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if lambda == 0.0 {
            return Ok(0.0);
        }
        v = hv.into_iter().map(|x| x / lambda).collect();
    }
    Ok(lambda)
}

/// Estimate the stochastic-gradient variance bound at `params` as the mean
/// squared deviation of sampled minibatch gradients from their average.
pub fn estimate_sigma_sq<T: Scalar>(
    workload: &dyn Workload<T>,
    params: &ParamVector<T>,
    batch_size: usize,
    n_samples: usize,
    seed: u64,
) -> Result<f64, CoherenceError> {
    assert!(n_samples >= 2);
    let shard: Vec<usize> = (0..workload.train_len()).collect();
    if shard.is_empty() {
        return Ok(0.0); // full-gradient workloads have no sampling noise
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = workload.param_dim();
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut local = WorkerLocal::None;
        let update = workload
            .batch_update(params, &mut local, &shard, batch_size, &mut rng)
            .map_err(|e| CoherenceError::Invalid(e.to_string()))?;
        let RawUpdate::Gradient { grad, .. } = update else {
            return Err(CoherenceError::Invalid(
                "variance estimation needs a gradient workload".into(),
            ));
        };
        grads.push(
            grad.densify(dim)
                .into_iter()
                .map(|g| g.to_f64().unwrap())
                .collect(),
        );
    }
    let mut mean = vec![0.0f64; dim];
    for g in &grads {
        for (m, &gi) in mean.iter_mut().zip(g) {
            *m += gi / n_samples as f64;
        }
    }
    let mut total = 0.0;
    for g in &grads {
        total += g
            .iter()
            .zip(&mean)
            .map(|(&gi, &mi)| (gi - mi).powi(2))
            .sum::<f64>();
    }
    Ok(total / n_samples as f64)
}

/// Check the bound against probe records from one run per seed. The
/// expectation is proxied by averaging squared norms across seeds at each
/// probed iteration; `params.f0` should be the measured initial objective
/// (averaged across seeds).
pub fn verify_bound(
    probes_per_seed: &[Vec<ProbeRecord>],
    params: &TheoremParams,
) -> Result<VerificationReport, CoherenceError> {
    params.validate()?;
    if probes_per_seed.is_empty() || probes_per_seed.iter().any(Vec::is_empty) {
        return Err(CoherenceError::MissingProbes);
    }
    // Iterations probed in every seed.
    let mut common: Vec<u64> = probes_per_seed[0].iter().map(|p| p.iter).collect();
    for probes in &probes_per_seed[1..] {
        let set: std::collections::BTreeSet<u64> = probes.iter().map(|p| p.iter).collect();
        common.retain(|i| set.contains(i));
    }
    if common.is_empty() {
        return Err(CoherenceError::MissingProbes);
    }

    let mut min_mean_norm = f64::INFINITY;
    for &iter in &common {
        let mut sum = 0.0;
        for probes in probes_per_seed {
            let p = probes.iter().find(|p| p.iter == iter).unwrap();
            sum += p.grad_norm_sq;
        }
        min_mean_norm = min_mean_norm.min(sum / probes_per_seed.len() as f64);
    }

    let mut mus: Vec<f64> = Vec::new();
    for probes in probes_per_seed {
        mus.extend(probes.iter().filter_map(|p| p.mu));
    }
    let (mu_min, mu_mean, negative_fraction) = if mus.is_empty() {
        (f64::NAN, f64::NAN, 0.0)
    } else {
        let min = mus.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = mus.iter().sum::<f64>() / mus.len() as f64;
        let neg = mus.iter().filter(|&&m| m < 0.0).count() as f64 / mus.len() as f64;
        (min, mean, neg)
    };

    let bound = theorem_bound(params);
    let pass = min_mean_norm <= bound;
    Ok(VerificationReport {
        bound,
        min_grad_norm_sq: min_mean_norm,
        pass,
        inconclusive: !pass && negative_fraction > 0.0,
        mu_min,
        mu_mean,
        negative_mu_fraction: negative_fraction,
        n_probes: common.len(),
        seeds: probes_per_seed.len(),
        f0: params.f0,
    })
}
