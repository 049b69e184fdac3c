//! Fully connected classifier: `depth` ReLU hidden layers followed by a
//! softmax layer. Depth 0 is multi-class logistic regression exactly.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::data::ClassificationData;
use super::nn::{
    affine_backward, affine_forward, argmax_first, init_affine, relu_backward, relu_inplace,
    softmax_cross_entropy, LayerDims, LayoutBuilder,
};
use super::{QualityMetric, RawUpdate, Workload, WorkerLocal, WorkloadError};
use crate::param::{ParamDelta, ParamVector};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct NetSpec {
    /// Number of hidden layers; 0 is MLR.
    pub depth: usize,
    pub width: usize,
    pub input_dim: usize,
    pub output_dim: usize,
}

pub struct DnnWorkload<T> {
    spec: NetSpec,
    layers: Vec<LayerDims>,
    dim: usize,
    data: Arc<ClassificationData<T>>,
    probe_len: usize,
}

impl<T: Scalar> DnnWorkload<T> {
    pub fn new(spec: NetSpec, data: Arc<ClassificationData<T>>, probe_len: usize) -> Self {
        assert_eq!(spec.input_dim, data.features);
        assert!(spec.output_dim >= data.classes);
        let mut builder = LayoutBuilder::new();
        let mut layers = Vec::new();
        let mut prev = spec.input_dim;
        for _ in 0..spec.depth {
            layers.push(builder.affine(prev, spec.width));
            prev = spec.width;
        }
        layers.push(builder.affine(prev, spec.output_dim));
        let probe_len = probe_len.min(data.train_len());
        Self {
            spec,
            layers,
            dim: builder.total(),
            data,
            probe_len,
        }
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    /// Mean softmax cross-entropy and its exact gradient on an explicit
    /// batch (row-major inputs).
    pub fn forward_backward(
        &self,
        params: &[T],
        xs: &[T],
        ys: &[usize],
    ) -> Result<(f64, Vec<T>), WorkloadError> {
        let batch = ys.len();
        // Forward, keeping each layer's activated output.
        let mut activations: Vec<Vec<T>> = Vec::with_capacity(self.layers.len());
        let mut current = xs.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut out = affine_forward(params, layer, &current, batch);
            if li + 1 < self.layers.len() {
                relu_inplace(&mut out);
            }
            activations.push(out.clone());
            current = out;
        }
        let logits = activations.last().unwrap();
        let (loss, mut grad_out) = softmax_cross_entropy(logits, ys, self.spec.output_dim);
        if !loss.is_finite() {
            return Err(WorkloadError::NonFinite("dnn loss".into()));
        }
        // Backward.
        let mut grad_params = vec![T::zero(); self.dim];
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let input: &[T] = if li == 0 { xs } else { &activations[li - 1] };
            let grad_in = affine_backward(params, layer, input, &grad_out, batch, &mut grad_params);
            grad_out = grad_in;
            if li > 0 {
                relu_backward(&activations[li - 1], &mut grad_out);
            }
        }
        Ok((loss, grad_params))
    }

    /// Fraction of correct argmax predictions, ties broken low.
    pub fn accuracy(&self, params: &[T], xs: &[T], ys: &[usize]) -> f64 {
        let batch = ys.len();
        let mut current = xs.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut out = affine_forward(params, layer, &current, batch);
            if li + 1 < self.layers.len() {
                relu_inplace(&mut out);
            }
            current = out;
        }
        let c = self.spec.output_dim;
        let correct = ys
            .iter()
            .enumerate()
            .filter(|&(b, &y)| argmax_first(&current[b * c..(b + 1) * c]) == y)
            .count();
        correct as f64 / batch as f64
    }

    fn gather(&self, indices: &[usize]) -> (Vec<T>, Vec<usize>) {
        let f = self.data.features;
        let mut xs = Vec::with_capacity(indices.len() * f);
        let mut ys = Vec::with_capacity(indices.len());
        for &i in indices {
            xs.extend_from_slice(self.data.train_row(i));
            ys.push(self.data.train_y[i]);
        }
        (xs, ys)
    }
}

impl<T: Scalar> Workload<T> for DnnWorkload<T> {
    fn label(&self) -> String {
        if self.spec.depth == 0 {
            "mlr".to_string()
        } else {
            format!("dnn-d{}", self.spec.depth)
        }
    }

    fn param_dim(&self) -> usize {
        self.dim
    }

    fn train_len(&self) -> usize {
        self.data.train_len()
    }

    fn quality_metric(&self) -> QualityMetric {
        QualityMetric {
            name: "test_accuracy",
            higher_is_better: true,
        }
    }

    fn default_batch_size(&self, _n_workers: usize) -> usize {
        32
    }

    fn init_params(&self, rng: &mut ChaCha8Rng) -> ParamVector<T> {
        let mut params = vec![T::zero(); self.dim];
        for layer in &self.layers {
            init_affine(&mut params, layer, rng);
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
        let indices: Vec<usize> = (0..batch_size)
            .map(|_| shard[rng.gen_range(0..shard.len())])
            .collect();
        let (xs, ys) = self.gather(&indices);
        let (loss, grad) = self.forward_backward(params.as_slice(), &xs, &ys)?;
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
        let acc = self.accuracy(params.as_slice(), &self.data.test_x, &self.data.test_y);
        if !acc.is_finite() {
            return Err(WorkloadError::NonFinite("dnn accuracy".into()));
        }
        Ok(acc)
    }

    fn probe_gradient(&self, params: &ParamVector<T>) -> Option<Result<ParamVector<T>, WorkloadError>> {
        let indices: Vec<usize> = (0..self.probe_len).collect();
        let (xs, ys) = self.gather(&indices);
        Some(
            self.forward_backward(params.as_slice(), &xs, &ys)
                .map(|(_, g)| ParamVector::from_vec(g)),
        )
    }

    fn probe_loss(&self, params: &ParamVector<T>) -> Option<Result<f64, WorkloadError>> {
        let indices: Vec<usize> = (0..self.probe_len).collect();
        let (xs, ys) = self.gather(&indices);
        Some(self.forward_backward(params.as_slice(), &xs, &ys).map(|(l, _)| l))
    }
}
