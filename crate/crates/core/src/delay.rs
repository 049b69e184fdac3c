//! Delay laws and the transit queue that holds in-flight updates until
//! their arrival iteration.
//!
//! An update generated at iteration `t` with sampled delay `r` arrives at
//! its destination cache at the start of iteration `t + 1 + r`. Uniform
//! delays draw `r` from {0, .., s-1} independently per (source,
//! destination) pair; the geometric straggler model draws one delay per
//! source each iteration, shared across all of its destinations.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::param::ParamDelta;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DelayError {
    #[error("invalid delay spec: {0}")]
    InvalidSpec(String),
    #[error(
        "infeasible mean: stragglers alone contribute {straggler_mean:.4} against target {target:.4}"
    )]
    InfeasibleMean { target: f64, straggler_mean: f64 },
}

/// Which delay law the simulation applies to in-flight updates.
#[derive(Clone, Debug, PartialEq)]
pub enum DelaySpec {
    /// r ~ uniform over {0, .., max_staleness - 1}; degenerate at 0 when
    /// max_staleness <= 1 (s = 0 is the no-staleness sequential case).
    UniformBounded { max_staleness: u32 },
    /// Each iteration `straggler_count` workers are re-drawn uniformly to be
    /// stragglers. Every source draws one geometric delay (success
    /// probability `p_straggler` or `p_fast`, support {0,1,2,..}, truncated
    /// at `cap`) shared across all its destinations.
    GeometricStraggler {
        p_straggler: f64,
        p_fast: f64,
        straggler_count: usize,
        cap: u32,
    },
}

impl DelaySpec {
    pub fn validate(&self, n_workers: usize) -> Result<(), DelayError> {
        match *self {
            DelaySpec::UniformBounded { .. } => Ok(()),
            DelaySpec::GeometricStraggler {
                p_straggler,
                p_fast,
                straggler_count,
                cap,
            } => {
                if !(p_straggler > 0.0 && p_straggler <= 1.0) {
                    return Err(DelayError::InvalidSpec(format!(
                        "p_straggler must be in (0, 1], got {p_straggler}"
                    )));
                }
                if !(p_fast > 0.0 && p_fast <= 1.0) {
                    return Err(DelayError::InvalidSpec(format!(
                        "p_fast must be in (0, 1], got {p_fast}"
                    )));
                }
                if straggler_count == 0 || straggler_count > n_workers {
                    return Err(DelayError::InvalidSpec(format!(
                        "straggler_count {straggler_count} out of range for {n_workers} workers"
                    )));
                }
                if cap == 0 {
                    return Err(DelayError::InvalidSpec("cap must be >= 1".into()));
                }
                Ok(())
            }
        }
    }

    /// Largest possible arrival lag (arrival - gen_iter) under this spec.
    pub fn max_lag(&self) -> u64 {
        match *self {
            DelaySpec::UniformBounded { max_staleness } => u64::from(max_staleness.max(1)),
            DelaySpec::GeometricStraggler { cap, .. } => u64::from(cap) + 1,
        }
    }
}

/// One delay draw from the uniform categorical over {0, .., s-1}.
///
/// s = 0 and s = 1 both yield 0 without consuming randomness; s = 0 is the
/// degenerate no-staleness case.
pub fn sample_delay_uniform<R: Rng>(max_staleness: u32, rng: &mut R) -> u32 {
    if max_staleness <= 1 {
        0
    } else {
        rng.gen_range(0..max_staleness)
    }
}

/// Geometric on {0, 1, 2, ..} with P(r = k) = p (1-p)^k, truncated at `cap`.
pub fn sample_geometric<R: Rng>(p: f64, cap: u32, rng: &mut R) -> u32 {
    if p >= 1.0 {
        return 0;
    }
    let u: f64 = rng.gen::<f64>();
    // Inverse CDF: k = floor(ln(1-u) / ln(1-p))
    let k = ((1.0 - u).ln() / (1.0 - p).ln()).floor();
    if !k.is_finite() || k < 0.0 {
        return 0;
    }
    if k >= f64::from(cap) {
        cap
    } else {
        k as u32
    }
}

/// Per-iteration delay matrix: delay from each source to each destination.
#[derive(Clone, Debug, PartialEq)]
pub struct DelayMatrix {
    n: usize,
    delays: Vec<u32>, // row-major, delays[src * n + dst]
}

impl DelayMatrix {
    pub fn n_workers(&self) -> usize {
        self.n
    }

    pub fn get(&self, source: usize, destination: usize) -> u32 {
        self.delays[source * self.n + destination]
    }

    /// Delay row of one source toward every destination.
    pub fn row(&self, source: usize) -> &[u32] {
        &self.delays[source * self.n..(source + 1) * self.n]
    }
}

/// Sample this iteration's full source x destination delay matrix.
pub fn sample_iteration_delays<R: Rng>(
    spec: &DelaySpec,
    n_workers: usize,
    rng: &mut R,
) -> DelayMatrix {
    assert!(n_workers >= 1);
    let mut delays = vec![0u32; n_workers * n_workers];
    match *spec {
        DelaySpec::UniformBounded { max_staleness } => {
            for d in delays.iter_mut() {
                *d = sample_delay_uniform(max_staleness, rng);
            }
        }
        DelaySpec::GeometricStraggler {
            p_straggler,
            p_fast,
            straggler_count,
            cap,
        } => {
            let picks = rand::seq::index::sample(rng, n_workers, straggler_count.min(n_workers));
            let mut is_straggler = vec![false; n_workers];
            for i in picks.iter() {
                is_straggler[i] = true;
            }
            for src in 0..n_workers {
                let p = if is_straggler[src] { p_straggler } else { p_fast };
                let r = sample_geometric(p, cap, rng);
                for dst in 0..n_workers {
                    delays[src * n_workers + dst] = r;
                }
            }
        }
    }
    DelayMatrix {
        n: n_workers,
        delays,
    }
}

/// Solve for the non-straggler success probability so the population mean
/// delay matches the uniform model's mean extra delay (s_uniform - 1)/2.
///
/// Uses the support-{0,1,..} geometric with mean (1-p)/p:
///   (c/P) (1-p_s)/p_s + (1 - c/P) (1-p_f)/p_f = (s_uniform - 1)/2.
/// When every worker is a straggler the equation has no p_fast term; the
/// degenerate answer 1.0 is returned (non-stragglers never delay).
pub fn match_mean_geometric(
    s_uniform: u32,
    p_straggler: f64,
    straggler_count: usize,
    n_workers: usize,
) -> Result<f64, DelayError> {
    assert!(n_workers >= 1 && straggler_count <= n_workers);
    assert!(p_straggler > 0.0 && p_straggler <= 1.0);
    if straggler_count == n_workers {
        eprintln!(
            "warning: every worker is a straggler; the mean-matching equation has no \
             non-straggler term, defaulting p_fast to 1"
        );
        return Ok(1.0);
    }
    let target = (f64::from(s_uniform) - 1.0) / 2.0;
    let frac = straggler_count as f64 / n_workers as f64;
    let straggler_mean = frac * (1.0 - p_straggler) / p_straggler;
    let residual = target - straggler_mean;
    if residual < 0.0 {
        return Err(DelayError::InfeasibleMean {
            target,
            straggler_mean,
        });
    }
    let fast_mean = residual / (1.0 - frac);
    Ok(1.0 / (1.0 + fast_mean))
}

/// A parameter delta stamped with its source worker and generation
/// iteration; the unit of delayed communication.
#[derive(Clone, Debug)]
pub struct UpdateMsg<T> {
    pub source: usize,
    pub gen_iter: u64,
    pub delta: Arc<ParamDelta<T>>,
}

/// An entry drained from the queue: the destination worker and the message.
pub type Delivery<T> = (usize, UpdateMsg<T>);

/// Holds in-flight updates keyed by arrival iteration.
#[derive(Debug)]
pub struct TransitQueue<T> {
    pending: BTreeMap<u64, Vec<Delivery<T>>>,
    scheduled: u64,
    drained: u64,
}

impl<T: Scalar> TransitQueue<T> {
    pub fn new() -> Self {
        Self {
            pending: BTreeMap::new(),
            scheduled: 0,
            drained: 0,
        }
    }

    /// Enqueue one message toward every destination; destination `d`
    /// arrives at `gen_iter + 1 + delays[d]`.
    pub fn schedule(&mut self, msg: UpdateMsg<T>, delays: &[u32]) {
        for (dst, &r) in delays.iter().enumerate() {
            let arrival = msg.gen_iter + 1 + u64::from(r);
            self.pending
                .entry(arrival)
                .or_default()
                .push((dst, msg.clone()));
            self.scheduled += 1;
        }
    }

    /// Remove and return every entry with arrival iteration <= `iter`,
    /// sorted by (gen_iter, source, destination).
    pub fn drain(&mut self, iter: u64) -> Vec<Delivery<T>> {
        let mut out = Vec::new();
        let due: Vec<u64> = self
            .pending
            .range(..=iter)
            .map(|(&arrival, _)| arrival)
            .collect();
        for arrival in due {
            let mut entries = self.pending.remove(&arrival).unwrap();
            out.append(&mut entries);
        }
        out.sort_by_key(|(dst, msg)| (msg.gen_iter, msg.source, *dst));
        self.drained += out.len() as u64;
        out
    }

    /// Remove everything still in flight regardless of arrival time.
    pub fn drain_all(&mut self) -> Vec<Delivery<T>> {
        self.drain(u64::MAX)
    }

    pub fn pending_len(&self) -> usize {
        self.pending.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Total (destination, message) pairs ever scheduled / drained.
    pub fn scheduled_count(&self) -> u64 {
        self.scheduled
    }

    pub fn drained_count(&self) -> u64 {
        self.drained
    }
}

impl<T: Scalar> Default for TransitQueue<T> {
    fn default() -> Self {
        Self::new()
    }
}
