//! Latent Dirichlet Allocation trained by collapsed Gibbs sampling.
//!
//! The shared parameters are the count matrices phi (word-topic, W x K) and
//! phi_tilde (topic totals, K), flattened into the cache vector. Topic
//! assignments z and the per-document counts theta stay worker-local.
//! Workers emit net count deltas; caches accumulate them additively, so
//! stale cross-worker counts can transiently go negative and are clamped
//! at zero wherever a distribution is formed.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::data::Corpus;
use super::{categorical_from_weights, QualityMetric, RawUpdate, Workload, WorkerLocal, WorkloadError};
use crate::math::ln_gamma;
use crate::param::{ParamDelta, ParamVector, SparseBuilder};
use crate::scalar::Scalar;

/// Worker-local Gibbs state for one shard of documents.
pub struct LdaLocal {
    /// Document ids (into the corpus) owned by this worker, in shard order.
    pub docs: Vec<usize>,
    /// Topic assignment per token, indexed [local_doc][token].
    pub z: Vec<Vec<u16>>,
    /// Document-topic counts, indexed [local_doc][topic].
    pub theta: Vec<Vec<u32>>,
    /// Next local document to sample (batches cycle through the shard).
    pub cursor: usize,
}

pub struct LdaWorkload {
    corpus: Arc<Corpus>,
    topics: usize,
    alpha: f64,
    beta: f64,
}

impl LdaWorkload {
    pub fn new(corpus: Arc<Corpus>, topics: usize, alpha: f64, beta: f64) -> Self {
        assert!(topics >= 1);
        assert!(alpha > 0.0 && beta > 0.0);
        Self {
            corpus,
            topics,
            alpha,
            beta,
        }
    }

    pub fn topics(&self) -> usize {
        self.topics
    }

    fn phi_index(&self, word: usize, topic: usize) -> usize {
        word * self.topics + topic
    }

    fn phi_tilde_index(&self, topic: usize) -> usize {
        self.corpus.vocab * self.topics + topic
    }

    /// Resample every token of one local document, accumulating count
    /// changes into `delta`. The effective shared counts seen mid-batch are
    /// cache + accumulated delta, clamped at zero.
    fn sample_document<T: Scalar, R: Rng>(
        &self,
        cache: &[T],
        local: &mut LdaLocal,
        doc_pos: usize,
        delta: &mut SparseBuilder<T>,
        weights: &mut Vec<f64>,
        rng: &mut R,
    ) {
        let doc_id = local.docs[doc_pos];
        let tokens = &self.corpus.docs[doc_id];
        let w_beta = self.beta * self.corpus.vocab as f64;
        for (j, &word) in tokens.iter().enumerate() {
            let word = word as usize;
            let old = local.z[doc_pos][j] as usize;
            local.theta[doc_pos][old] -= 1;
            delta.add(self.phi_index(word, old), -T::one());
            delta.add(self.phi_tilde_index(old), -T::one());

            weights.clear();
            let mut total = 0.0;
            for k in 0..self.topics {
                let phi_idx = self.phi_index(word, k);
                let tilde_idx = self.phi_tilde_index(k);
                let phi_eff = (cache[phi_idx] + delta.get(phi_idx))
                    .to_f64()
                    .unwrap()
                    .max(0.0);
                let tilde_eff = (cache[tilde_idx] + delta.get(tilde_idx))
                    .to_f64()
                    .unwrap()
                    .max(0.0);
                let w = (f64::from(local.theta[doc_pos][k]) + self.alpha) * (phi_eff + self.beta)
                    / (tilde_eff + w_beta);
                weights.push(w);
                total += w;
            }
            let u: f64 = rng.gen();
            let new = if total > 0.0 && total.is_finite() {
                categorical_from_weights(weights, total, u)
            } else {
                // All-zero conditional cannot arise with positive priors;
                // kept as the uniform fallback for degenerate configs.
                (u * self.topics as f64) as usize % self.topics
            };
            local.theta[doc_pos][new] += 1;
            delta.add(self.phi_index(word, new), T::one());
            delta.add(self.phi_tilde_index(new), T::one());
            local.z[doc_pos][j] = new as u16;
        }
    }

    /// Per-delta conservation: every topic's phi column change matches its
    /// phi_tilde change, and the net token count is untouched. Debug builds
    /// check this on every emitted batch delta.
    #[cfg(debug_assertions)]
    fn check_delta_conservation<T: Scalar>(&self, delta: &ParamDelta<T>) {
        let ParamDelta::Sparse(entries) = delta else {
            panic!("lda deltas are sparse");
        };
        let boundary = self.corpus.vocab * self.topics;
        let mut phi_cols = vec![0.0f64; self.topics];
        let mut tilde = vec![0.0f64; self.topics];
        for &(idx, v) in entries {
            let v = v.to_f64().unwrap();
            if idx < boundary {
                phi_cols[idx % self.topics] += v;
            } else {
                tilde[idx - boundary] += v;
            }
        }
        for k in 0..self.topics {
            assert_eq!(
                phi_cols[k], tilde[k],
                "topic {k}: phi column delta diverged from phi_tilde delta"
            );
        }
        let net: f64 = tilde.iter().sum();
        assert_eq!(net, 0.0, "batch delta changed the corpus token count");
    }

    /// Complete-data log likelihood log p(w|z) + log p(z) in the standard
    /// Dirichlet-multinomial closed form, from clamped shared counts plus
    /// the workers' document-topic counts.
    pub fn log_likelihood<T: Scalar>(&self, cache: &[T], thetas: &[&LdaLocal]) -> f64 {
        let w = self.corpus.vocab;
        let k = self.topics;
        let w_beta = self.beta * w as f64;
        let k_alpha = self.alpha * k as f64;

        let mut log_pw = k as f64 * (ln_gamma(w_beta) - w as f64 * ln_gamma(self.beta));
        for topic in 0..k {
            let mut tilde = 0.0;
            for word in 0..w {
                let c = cache[self.phi_index(word, topic)].to_f64().unwrap().max(0.0);
                log_pw += ln_gamma(c + self.beta);
                tilde += c;
            }
            // Use the sum of clamped phi counts rather than the cached
            // phi_tilde so the Gamma arguments stay consistent.
            log_pw -= ln_gamma(tilde + w_beta);
        }

        let mut log_pz = 0.0;
        let mut n_docs = 0usize;
        for local in thetas {
            for theta in &local.theta {
                n_docs += 1;
                let mut len = 0.0;
                for &c in theta {
                    log_pz += ln_gamma(f64::from(c) + self.alpha);
                    len += f64::from(c);
                }
                log_pz -= ln_gamma(len + k_alpha);
            }
        }
        log_pz += n_docs as f64 * (ln_gamma(k_alpha) - k as f64 * ln_gamma(self.alpha));
        log_pw + log_pz
    }
}

impl<T: Scalar> Workload<T> for LdaWorkload {
    fn label(&self) -> String {
        format!("lda-k{}", self.topics)
    }

    fn param_dim(&self) -> usize {
        self.corpus.vocab * self.topics + self.topics
    }

    fn train_len(&self) -> usize {
        self.corpus.docs.len()
    }

    fn quality_metric(&self) -> QualityMetric {
        QualityMetric {
            name: "log_likelihood",
            higher_is_better: true,
        }
    }

    /// Documents per worker-iteration: D / (10 P), at least 1.
    fn default_batch_size(&self, n_workers: usize) -> usize {
        (self.corpus.docs.len() / (10 * n_workers)).max(1)
    }

    fn init_params(&self, _rng: &mut ChaCha8Rng) -> ParamVector<T> {
        // Counts start at zero; each worker contributes its initial
        // assignments through init_local's delta.
        ParamVector::zeros(Workload::<T>::param_dim(self))
    }

    fn init_local(
        &self,
        shard: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> (WorkerLocal, Option<ParamDelta<T>>) {
        let mut z = Vec::with_capacity(shard.len());
        let mut theta = Vec::with_capacity(shard.len());
        let mut delta = SparseBuilder::new();
        for &doc_id in shard {
            let tokens = &self.corpus.docs[doc_id];
            let mut zs = Vec::with_capacity(tokens.len());
            let mut th = vec![0u32; self.topics];
            for &word in tokens {
                let k = rng.gen_range(0..self.topics);
                zs.push(k as u16);
                th[k] += 1;
                delta.add(self.phi_index(word as usize, k), T::one());
                delta.add(self.phi_tilde_index(k), T::one());
            }
            z.push(zs);
            theta.push(th);
        }
        (
            WorkerLocal::Lda(LdaLocal {
                docs: shard.to_vec(),
                z,
                theta,
                cursor: 0,
            }),
            Some(delta.finish()),
        )
    }

    fn batch_update(
        &self,
        params: &ParamVector<T>,
        local: &mut WorkerLocal,
        _shard: &[usize],
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<RawUpdate<T>, WorkloadError> {
        let WorkerLocal::Lda(local) = local else {
            return Err(WorkloadError::Invalid("lda worker state missing".into()));
        };
        let n_docs = local.docs.len();
        if n_docs == 0 {
            return Ok(RawUpdate::Counts {
                delta: ParamDelta::Sparse(Vec::new()),
            });
        }
        let mut delta = SparseBuilder::new();
        let mut weights = Vec::with_capacity(self.topics);
        for _ in 0..batch_size.min(n_docs) {
            let pos = local.cursor;
            local.cursor = (local.cursor + 1) % n_docs;
            self.sample_document(params.as_slice(), local, pos, &mut delta, &mut weights, rng);
        }
        let delta = delta.finish();
        #[cfg(debug_assertions)]
        self.check_delta_conservation(&delta);
        Ok(RawUpdate::Counts { delta })
    }

    fn evaluate(
        &self,
        params: &ParamVector<T>,
        locals: &[WorkerLocal],
    ) -> Result<f64, WorkloadError> {
        let thetas: Vec<&LdaLocal> = locals
            .iter()
            .filter_map(|l| match l {
                WorkerLocal::Lda(local) => Some(local),
                WorkerLocal::None => None,
            })
            .collect();
        let ll = self.log_likelihood(params.as_slice(), &thetas);
        if !ll.is_finite() {
            return Err(WorkloadError::NonFinite("lda log likelihood".into()));
        }
        Ok(ll)
    }

    fn probe_gradient(&self, _params: &ParamVector<T>) -> Option<Result<ParamVector<T>, WorkloadError>> {
        None
    }

    fn probe_loss(&self, _params: &ParamVector<T>) -> Option<Result<f64, WorkloadError>> {
        None
    }

    fn uses_optimizer(&self) -> bool {
        false
    }

    fn sparse_updates(&self) -> bool {
        true
    }
}
