//! Matrix factorization by SGD on the l2-penalized squared reconstruction
//! objective. The factor matrices L (rows x rank) and R (cols x rank) are
//! flattened into one parameter vector; batch gradients touch only the rows
//! and columns present in the batch and so travel as sparse deltas.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;


use super::data::RatingsData;
use super::{QualityMetric, RawUpdate, Workload, WorkerLocal, WorkloadError};
use crate::param::{ParamDelta, ParamVector, SparseBuilder};
use crate::scalar::{cast, Scalar};

pub struct MfWorkload<T> {
    rank: usize,
    lambda: f64,
    data: Arc<RatingsData<T>>,
    /// Observed entries per row / per column, for the per-occurrence
    /// regularizer scaling that keeps batch gradients unbiased.
    row_count: Vec<u32>,
    col_count: Vec<u32>,
    probe_len: usize,
}

impl<T: Scalar> MfWorkload<T> {
    pub fn new(rank: usize, lambda: f64, data: Arc<RatingsData<T>>, probe_len: usize) -> Self {
        assert!(rank >= 1 && rank <= data.rows.min(data.cols));
        assert!(lambda >= 0.0);
        let mut row_count = vec![0u32; data.rows];
        let mut col_count = vec![0u32; data.cols];
        for &(i, j, _) in &data.entries {
            row_count[i as usize] += 1;
            col_count[j as usize] += 1;
        }
        let probe_len = probe_len.min(data.len());
        Self {
            rank,
            lambda,
            data,
            row_count,
            col_count,
            probe_len,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    fn l_offset(&self, row: usize) -> usize {
        row * self.rank
    }

    fn r_offset(&self, col: usize) -> usize {
        (self.data.rows + col) * self.rank
    }

    fn predict(&self, params: &[T], row: usize, col: usize) -> T {
        let l = &params[self.l_offset(row)..self.l_offset(row) + self.rank];
        let r = &params[self.r_offset(col)..self.r_offset(col) + self.rank];
        l.iter().zip(r).map(|(&a, &b)| a * b).sum()
    }

    /// Objective over the given observation indices:
    /// (1/n) [ sum (D_ij - L_i . R_j)^2 + lambda (|L|_F^2 + |R|_F^2) ].
    pub fn loss(&self, params: &[T], obs: &[usize]) -> Result<f64, WorkloadError> {
        assert!(!obs.is_empty(), "loss over empty observation set");
        let mut sq = 0.0f64;
        for &o in obs {
            let (i, j, v) = self.data.entries[o];
            let e = (v - self.predict(params, i as usize, j as usize))
                .to_f64()
                .unwrap();
            sq += e * e;
        }
        let reg: f64 = params.iter().map(|&p| p.to_f64().unwrap().powi(2)).sum();
        let loss = (sq + self.lambda * reg) / obs.len() as f64;
        if !loss.is_finite() {
            return Err(WorkloadError::NonFinite("mf loss".into()));
        }
        Ok(loss)
    }

    /// Stochastic gradient on a batch of observation indices. For each
    /// entry (i, j) with residual e = D_ij - L_i . R_j:
    ///   dL_i += (1/|batch|) (-2 e R_j + 2 lambda L_i / n_i)
    ///   dR_j += (1/|batch|) (-2 e L_i + 2 lambda R_j / n_j)
    /// where n_i, n_j are the global observation counts of row i / col j.
    pub fn gradient(&self, params: &[T], batch: &[usize]) -> Result<ParamDelta<T>, WorkloadError> {
        let inv_b = 1.0 / batch.len() as f64;
        let mut builder = SparseBuilder::new();
        for &o in batch {
            let (i, j, v) = self.data.entries[o];
            let (i, j) = (i as usize, j as usize);
            let e = v - self.predict(params, i, j);
            let l_off = self.l_offset(i);
            let r_off = self.r_offset(j);
            let reg_l: T = cast(2.0 * self.lambda / f64::from(self.row_count[i]) * inv_b);
            let reg_r: T = cast(2.0 * self.lambda / f64::from(self.col_count[j]) * inv_b);
            let scale: T = cast(2.0 * inv_b);
            for k in 0..self.rank {
                let lk = params[l_off + k];
                let rk = params[r_off + k];
                builder.add(l_off + k, -scale * e * rk + reg_l * lk);
                builder.add(r_off + k, -scale * e * lk + reg_r * rk);
            }
        }
        let delta = builder.finish();
        if !delta.is_finite() {
            return Err(WorkloadError::NonFinite("mf gradient".into()));
        }
        Ok(delta)
    }
}

impl<T: Scalar> Workload<T> for MfWorkload<T> {
    fn label(&self) -> String {
        "mf".to_string()
    }

    fn param_dim(&self) -> usize {
        (self.data.rows + self.data.cols) * self.rank
    }

    fn train_len(&self) -> usize {
        self.data.len()
    }

    fn quality_metric(&self) -> QualityMetric {
        QualityMetric {
            name: "train_loss",
            higher_is_better: false,
        }
    }

    fn default_batch_size(&self, _n_workers: usize) -> usize {
        25_000.min(self.data.len().max(1))
    }

    fn init_params(&self, rng: &mut ChaCha8Rng) -> ParamVector<T> {
        let dim = Workload::<T>::param_dim(self);
        let mut params = vec![T::zero(); dim];
        for p in params.iter_mut() {
            let z: f64 = super::std_normal(rng);
            *p = cast(0.1 * z);
        }
        ParamVector::from_vec(params)
    }

    fn init_local(
        &self,
        _shard: &[usize],
        _rng: &mut ChaCha8Rng,
    ) -> (WorkerLocal, Option<ParamDelta<T>>) {
        (WorkerLocal::None, None)
    }

    fn batch_update(
        &self,
        params: &ParamVector<T>,
        _local: &mut WorkerLocal,
        shard: &[usize],
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<RawUpdate<T>, WorkloadError> {
        let batch: Vec<usize> = (0..batch_size)
            .map(|_| shard[rng.gen_range(0..shard.len())])
            .collect();
        let grad = self.gradient(params.as_slice(), &batch)?;
        let batch_loss = self.loss(params.as_slice(), &batch)?;
        Ok(RawUpdate::Gradient {
            grad,
            batch_loss,
        })
    }

    fn evaluate(
        &self,
        params: &ParamVector<T>,
        _locals: &[WorkerLocal],
    ) -> Result<f64, WorkloadError> {
        let all: Vec<usize> = (0..self.data.len()).collect();
        self.loss(params.as_slice(), &all)
    }

    fn probe_gradient(&self, params: &ParamVector<T>) -> Option<Result<ParamVector<T>, WorkloadError>> {
        let subset: Vec<usize> = (0..self.probe_len).collect();
        Some(
            self.gradient(params.as_slice(), &subset)
                .map(|d| ParamVector::from_vec(d.densify(Workload::<T>::param_dim(self)))),
        )
    }

    fn probe_loss(&self, params: &ParamVector<T>) -> Option<Result<f64, WorkloadError>> {
        let subset: Vec<usize> = (0..self.probe_len).collect();
        Some(self.loss(params.as_slice(), &subset))
    }

    fn sparse_updates(&self) -> bool {
        true
    }
}
