//! Diagonal quadratic objective F(x) = 1/2 x' A x with known spectrum, used
//! to verify the convergence bound: the largest eigenvalue is the exact
//! gradient Lipschitz constant and full-batch gradients make the stochastic
//! variance zero.

use rand_chacha::ChaCha8Rng;


use super::{QualityMetric, RawUpdate, Workload, WorkerLocal, WorkloadError};
use crate::param::{ParamDelta, ParamVector};
use crate::scalar::{cast, Scalar};

pub struct QuadraticWorkload<T> {
    eigs: Vec<T>,
}

impl<T: Scalar> QuadraticWorkload<T> {
    /// Eigenvalues spread linearly over [eig_min, eig_max].
    pub fn new(dim: usize, eig_min: f64, eig_max: f64) -> Self {
        assert!(dim >= 1 && eig_min > 0.0 && eig_max >= eig_min);
        let eigs = (0..dim)
            .map(|i| {
                let t = if dim == 1 {
                    0.0
                } else {
                    i as f64 / (dim - 1) as f64
                };
                cast(eig_min + t * (eig_max - eig_min))
            })
            .collect();
        Self { eigs }
    }

    pub fn lipschitz(&self) -> f64 {
        self.eigs
            .iter()
            .map(|e| e.to_f64().unwrap())
            .fold(0.0, f64::max)
    }

    pub fn objective(&self, x: &[T]) -> f64 {
        x.iter()
            .zip(&self.eigs)
            .map(|(&xi, &a)| 0.5 * a.to_f64().unwrap() * xi.to_f64().unwrap().powi(2))
            .sum()
    }

    pub fn gradient(&self, x: &[T]) -> Vec<T> {
        x.iter().zip(&self.eigs).map(|(&xi, &a)| a * xi).collect()
    }
}

impl<T: Scalar> Workload<T> for QuadraticWorkload<T> {
    fn label(&self) -> String {
        "quadratic".to_string()
    }

    fn param_dim(&self) -> usize {
        self.eigs.len()
    }

    fn train_len(&self) -> usize {
        0 // no data to shard; every batch is the full gradient
    }

    fn quality_metric(&self) -> QualityMetric {
        QualityMetric {
            name: "objective",
            higher_is_better: false,
        }
    }

    fn default_batch_size(&self, _n_workers: usize) -> usize {
        1
    }

    fn init_params(&self, rng: &mut ChaCha8Rng) -> ParamVector<T> {
        let values = self
            .eigs
            .iter()
            .map(|_| cast::<T>(super::std_normal(rng)))
            .collect();
        ParamVector::from_vec(values)
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
        _shard: &[usize],
        _batch_size: usize,
        _rng: &mut ChaCha8Rng,
    ) -> Result<RawUpdate<T>, WorkloadError> {
        let grad = self.gradient(params.as_slice());
        let loss = self.objective(params.as_slice());
        if !loss.is_finite() {
            return Err(WorkloadError::NonFinite("quadratic objective".into()));
        }
        Ok(RawUpdate::Gradient {
            grad: ParamDelta::Dense(grad),
            batch_loss: loss,
        })
    }

    fn evaluate(
        &self,
        params: &ParamVector<T>,
        _locals: &[WorkerLocal],
    ) -> Result<f64, WorkloadError> {
        let f = self.objective(params.as_slice());
        if !f.is_finite() {
            return Err(WorkloadError::NonFinite("quadratic objective".into()));
        }
        Ok(f)
    }

    fn probe_gradient(&self, params: &ParamVector<T>) -> Option<Result<ParamVector<T>, WorkloadError>> {
        Some(Ok(ParamVector::from_vec(self.gradient(params.as_slice()))))
    }

    fn probe_loss(&self, params: &ParamVector<T>) -> Option<Result<f64, WorkloadError>> {
        Some(Ok(self.objective(params.as_slice())))
    }
}
