//! Variational autoencoder trained by reparameterized black-box VI.
//!
//! Encoder and decoder are ReLU stacks of equal depth; the encoder ends in
//! separate mean and log-variance heads, the latent draw is
//! z = mu + sigma * eps with eps ~ N(0, I), and the loss is the unit-variance
//! Gaussian reconstruction error (additive constant dropped) plus the
//! closed-form KL to the standard normal prior. Evaluation and probe
//! gradients use noise vectors frozen at construction so both are pure
//! functions of the parameters.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;


use super::data::ClassificationData;
use super::nn::{
    affine_backward, affine_forward, init_affine, relu_backward, relu_inplace, LayerDims,
    LayoutBuilder,
};
use super::{QualityMetric, RawUpdate, Workload, WorkerLocal, WorkloadError};
use crate::param::{ParamDelta, ParamVector};
use crate::scalar::{cast, Scalar};

#[derive(Clone, Debug)]
pub struct VaeSpec {
    /// Layer count of the encoder and of the decoder (1..=3 in practice).
    pub depth: usize,
    pub width: usize,
    pub input_dim: usize,
    pub latent_dim: usize,
}

pub struct VaeWorkload<T> {
    spec: VaeSpec,
    enc_layers: Vec<LayerDims>,
    mu_head: LayerDims,
    logvar_head: LayerDims,
    dec_layers: Vec<LayerDims>,
    out_layer: LayerDims,
    dim: usize,
    data: Arc<ClassificationData<T>>,
    test_eps: Vec<T>,
    probe_eps: Vec<T>,
    probe_len: usize,
}

impl<T: Scalar> VaeWorkload<T> {
    pub fn new(
        spec: VaeSpec,
        data: Arc<ClassificationData<T>>,
        probe_len: usize,
        noise_seed: u64,
    ) -> Self {
        assert!(spec.depth >= 1);
        assert_eq!(spec.input_dim, data.features);
        let mut b = LayoutBuilder::new();
        let mut enc_layers = Vec::new();
        let mut prev = spec.input_dim;
        for _ in 0..spec.depth {
            enc_layers.push(b.affine(prev, spec.width));
            prev = spec.width;
        }
        let mu_head = b.affine(prev, spec.latent_dim);
        let logvar_head = b.affine(prev, spec.latent_dim);
        let mut dec_layers = Vec::new();
        prev = spec.latent_dim;
        for _ in 0..spec.depth {
            dec_layers.push(b.affine(prev, spec.width));
            prev = spec.width;
        }
        let out_layer = b.affine(prev, spec.input_dim);

        let probe_len = probe_len.min(data.train_len());
        let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mut draw = |n: usize| -> Vec<T> {
            (0..n * spec.latent_dim)
                .map(|_| cast::<T>(super::std_normal(&mut noise_rng)))
                .collect()
        };
        let test_eps = draw(data.test_len());
        let probe_eps = draw(probe_len);
        Self {
            spec,
            enc_layers,
            mu_head,
            logvar_head,
            dec_layers,
            out_layer,
            dim: b.total(),
            data,
            test_eps,
            probe_eps,
            probe_len,
        }
    }

    pub fn spec(&self) -> &VaeSpec {
        &self.spec
    }

    /// Negative ELBO (up to the reconstruction constant) and its exact
    /// gradient for an explicit batch and noise draw. `eps` is row-major
    /// [batch, latent_dim].
    pub fn loss_and_grad(
        &self,
        params: &[T],
        xs: &[T],
        eps: &[T],
    ) -> Result<(f64, Vec<T>), WorkloadError> {
        let batch = xs.len() / self.spec.input_dim;
        debug_assert_eq!(eps.len(), batch * self.spec.latent_dim);
        let latent = self.spec.latent_dim;
        let inv_b: T = cast(1.0 / batch as f64);

        // Encoder trunk.
        let mut enc_acts: Vec<Vec<T>> = Vec::with_capacity(self.enc_layers.len());
        let mut current = xs.to_vec();
        for layer in &self.enc_layers {
            let mut out = affine_forward(params, layer, &current, batch);
            relu_inplace(&mut out);
            enc_acts.push(out.clone());
            current = out;
        }
        let h = enc_acts.last().unwrap().clone();
        let mu = affine_forward(params, &self.mu_head, &h, batch);
        let logvar = affine_forward(params, &self.logvar_head, &h, batch);

        // Reparameterized latent draw.
        let mut sigma = vec![T::zero(); batch * latent];
        let mut z = vec![T::zero(); batch * latent];
        let half: T = cast(0.5);
        for i in 0..batch * latent {
            sigma[i] = (logvar[i] * half).exp();
            z[i] = mu[i] + sigma[i] * eps[i];
        }

        // Decoder trunk.
        let mut dec_acts: Vec<Vec<T>> = Vec::with_capacity(self.dec_layers.len());
        current = z.clone();
        for layer in &self.dec_layers {
            let mut out = affine_forward(params, layer, &current, batch);
            relu_inplace(&mut out);
            dec_acts.push(out.clone());
            current = out;
        }
        let xhat = affine_forward(params, &self.out_layer, &current, batch);

        // Loss: mean over the batch of reconstruction + KL.
        let mut recon = 0.0f64;
        for (xh, x) in xhat.iter().zip(xs) {
            let d = (*xh - *x).to_f64().unwrap();
            recon += 0.5 * d * d;
        }
        let mut kl = 0.0f64;
        for i in 0..batch * latent {
            let m = mu[i].to_f64().unwrap();
            let lv = logvar[i].to_f64().unwrap();
            kl += -0.5 * (1.0 + lv - m * m - lv.exp());
        }
        let loss = (recon + kl) / batch as f64;
        if !loss.is_finite() {
            return Err(WorkloadError::NonFinite("vae loss".into()));
        }

        // Backward.
        let mut grad_params = vec![T::zero(); self.dim];
        let mut grad: Vec<T> = xhat
            .iter()
            .zip(xs)
            .map(|(&xh, &x)| (xh - x) * inv_b)
            .collect();
        let dec_input_of = |li: usize| -> &[T] {
            if li == 0 {
                &z
            } else {
                &dec_acts[li - 1]
            }
        };
        grad = affine_backward(
            params,
            &self.out_layer,
            dec_acts.last().unwrap(),
            &grad,
            batch,
            &mut grad_params,
        );
        for li in (0..self.dec_layers.len()).rev() {
            relu_backward(&dec_acts[li], &mut grad);
            grad = affine_backward(
                params,
                &self.dec_layers[li],
                dec_input_of(li),
                &grad,
                batch,
                &mut grad_params,
            );
        }
        // grad now holds dLoss/dz.
        let dz = grad;
        let mut dmu = vec![T::zero(); batch * latent];
        let mut dlogvar = vec![T::zero(); batch * latent];
        let one = T::one();
        for i in 0..batch * latent {
            dmu[i] = dz[i] + mu[i] * inv_b;
            dlogvar[i] = dz[i] * eps[i] * sigma[i] * half + (logvar[i].exp() - one) * half * inv_b;
        }
        let mut dh = affine_backward(params, &self.mu_head, &h, &dmu, batch, &mut grad_params);
        let dh2 = affine_backward(params, &self.logvar_head, &h, &dlogvar, batch, &mut grad_params);
        for (a, b) in dh.iter_mut().zip(dh2) {
            *a += b;
        }
        grad = dh;
        for li in (0..self.enc_layers.len()).rev() {
            relu_backward(&enc_acts[li], &mut grad);
            let input: &[T] = if li == 0 { xs } else { &enc_acts[li - 1] };
            grad = affine_backward(
                params,
                &self.enc_layers[li],
                input,
                &grad,
                batch,
                &mut grad_params,
            );
        }
        if grad_params.iter().any(|g| !g.is_finite()) {
            return Err(WorkloadError::NonFinite("vae gradient".into()));
        }
        Ok((loss, grad_params))
    }

    fn gather_train(&self, indices: &[usize]) -> Vec<T> {
        let f = self.data.features;
        let mut xs = Vec::with_capacity(indices.len() * f);
        for &i in indices {
            xs.extend_from_slice(self.data.train_row(i));
        }
        xs
    }
}

impl<T: Scalar> Workload<T> for VaeWorkload<T> {
    fn label(&self) -> String {
        format!("vae-d{}", self.spec.depth)
    }

    fn param_dim(&self) -> usize {
        self.dim
    }

    fn train_len(&self) -> usize {
        self.data.train_len()
    }

    fn quality_metric(&self) -> QualityMetric {
        QualityMetric {
            name: "test_loss",
            higher_is_better: false,
        }
    }

    fn default_batch_size(&self, _n_workers: usize) -> usize {
        32
    }

    fn init_params(&self, rng: &mut ChaCha8Rng) -> ParamVector<T> {
        let mut params = vec![T::zero(); self.dim];
        for layer in self
            .enc_layers
            .iter()
            .chain([&self.mu_head, &self.logvar_head])
            .chain(self.dec_layers.iter())
            .chain([&self.out_layer])
        {
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
        let xs = self.gather_train(&indices);
        let eps: Vec<T> = (0..indices.len() * self.spec.latent_dim)
            .map(|_| cast::<T>(super::std_normal(rng)))
            .collect();
        let (loss, grad) = self.loss_and_grad(params.as_slice(), &xs, &eps)?;
        Ok(RawUpdate::Gradient {
            grad: ParamDelta::Dense(grad),
            batch_loss: loss,
        })
    }

    /// Test loss with the frozen per-sample noise, evaluated in chunks.
    fn evaluate(
        &self,
        params: &ParamVector<T>,
        _locals: &[WorkerLocal],
    ) -> Result<f64, WorkloadError> {
        let n = self.data.test_len();
        let chunk = 128usize;
        let mut total = 0.0f64;
        let mut start = 0usize;
        while start < n {
            let end = (start + chunk).min(n);
            let xs: Vec<T> = (start..end)
                .flat_map(|i| self.data.test_row(i).to_vec())
                .collect();
            let eps =
                &self.test_eps[start * self.spec.latent_dim..end * self.spec.latent_dim];
            let (loss, _) = self.loss_and_grad(params.as_slice(), &xs, eps)?;
            total += loss * (end - start) as f64;
            start = end;
        }
        Ok(total / n as f64)
    }

    fn probe_gradient(&self, params: &ParamVector<T>) -> Option<Result<ParamVector<T>, WorkloadError>> {
        let indices: Vec<usize> = (0..self.probe_len).collect();
        let xs = self.gather_train(&indices);
        Some(
            self.loss_and_grad(params.as_slice(), &xs, &self.probe_eps)
                .map(|(_, g)| ParamVector::from_vec(g)),
        )
    }

    fn probe_loss(&self, params: &ParamVector<T>) -> Option<Result<f64, WorkloadError>> {
        let indices: Vec<usize> = (0..self.probe_len).collect();
        let xs = self.gather_train(&indices);
        Some(
            self.loss_and_grad(params.as_slice(), &xs, &self.probe_eps)
                .map(|(l, _)| l),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workloads::data::synth_latent01;
    use rand::SeedableRng;

    fn toy() -> VaeWorkload<f64> {
        let data = Arc::new(synth_latent01::<f64>(6, 2, 40, 12, 0.02, 21));
        VaeWorkload::new(
            VaeSpec {
                depth: 1,
                width: 8,
                input_dim: 6,
                latent_dim: 3,
            },
            data,
            8,
            77,
        )
    }

    #[test]
    fn kl_term_vanishes_at_prior() {
        // With all parameters zero: mu = 0, logvar = 0, z = eps, the
        // decoder output is 0, so loss = mean of 0.5 |x|^2 and KL = 0.
        let w = toy();
        let params = vec![0.0; Workload::<f64>::param_dim(&w)];
        let xs = w.gather_train(&[0, 1, 2]);
        let eps = vec![0.3; 3 * 3];
        let (loss, _) = w.loss_and_grad(&params, &xs, &eps).unwrap();
        let expect: f64 =
            xs.iter().map(|&x| 0.5 * x * x).sum::<f64>() / 3.0;
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn evaluate_is_deterministic_given_params() {
        let w = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = Workload::<f64>::init_params(&w, &mut rng);
        let a = w.evaluate(&params, &[]).unwrap();
        let b = w.evaluate(&params, &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_eps_gradient_matches_finite_differences() {
        let w = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = Workload::<f64>::init_params(&w, &mut rng).into_vec();
        let xs = w.gather_train(&[0, 3, 7]);
        let eps: Vec<f64> = (0..9).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let (_, grad) = w.loss_and_grad(&params, &xs, &eps).unwrap();
        let h = 1e-5;
        // Spot-check a spread of coordinates.
        for idx in (0..params.len()).step_by(params.len() / 17 + 1) {
            let mut plus = params.clone();
            plus[idx] += h;
            let mut minus = params.clone();
            minus[idx] -= h;
            let (lp, _) = w.loss_and_grad(&plus, &xs, &eps).unwrap();
            let (lm, _) = w.loss_and_grad(&minus, &xs, &eps).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(grad[idx].abs()).max(1e-6);
            assert!(
                (grad[idx] - fd).abs() / denom < 1e-4,
                "idx {idx}: analytic {} vs fd {}",
                grad[idx],
                fd
            );
        }
    }
}
