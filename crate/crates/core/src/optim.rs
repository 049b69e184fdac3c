//! The five update rules, maintained as per-worker state, transforming a
//! raw gradient into a broadcast-ready parameter delta.
//!
//! Optimizer state lives at the generating worker and is updated at
//! generation time; the transmitted delta is post-optimizer, so caches stay
//! pure additive accumulators.

use thiserror::Error;

use crate::param::ParamDelta;
use crate::scalar::{cast, Scalar};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("optimizer {0} keeps per-coordinate state and cannot run on sparse updates")]
    UnsupportedOptimizer(&'static str),
    #[error("invalid optimizer spec: {0}")]
    InvalidSpec(String),
}

/// Update rule and its hyperparameters (stored at config precision).
#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerSpec {
    Sgd { lr: f64 },
    Momentum { lr: f64, gamma: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    Adagrad { lr: f64, eps: f64 },
    RmsProp { lr: f64, decay: f64, momentum: f64, eps: f64 },
}

impl OptimizerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            OptimizerSpec::Sgd { .. } => "sgd",
            OptimizerSpec::Momentum { .. } => "momentum",
            OptimizerSpec::Adam { .. } => "adam",
            OptimizerSpec::Adagrad { .. } => "adagrad",
            OptimizerSpec::RmsProp { .. } => "rmsprop",
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerSpec::Sgd { lr }
            | OptimizerSpec::Momentum { lr, .. }
            | OptimizerSpec::Adam { lr, .. }
            | OptimizerSpec::Adagrad { lr, .. }
            | OptimizerSpec::RmsProp { lr, .. } => lr,
        }
    }

    /// SGD is the only rule without per-coordinate state, hence the only one
    /// allowed on sparse updates.
    pub fn is_stateless(&self) -> bool {
        matches!(self, OptimizerSpec::Sgd { .. })
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let check_unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(OptimError::InvalidSpec(format!(
                    "{name} must be in [0, 1), got {v}"
                )))
            }
        };
        if self.lr() <= 0.0 {
            return Err(OptimError::InvalidSpec(format!(
                "learning rate must be > 0, got {}",
                self.lr()
            )));
        }
        match *self {
            OptimizerSpec::Sgd { .. } => Ok(()),
            OptimizerSpec::Momentum { gamma, .. } => check_unit("gamma", gamma),
            OptimizerSpec::Adam { beta1, beta2, eps, .. } => {
                check_unit("beta1", beta1)?;
                check_unit("beta2", beta2)?;
                if eps <= 0.0 {
                    return Err(OptimError::InvalidSpec("eps must be > 0".into()));
                }
                Ok(())
            }
            OptimizerSpec::Adagrad { eps, .. } => {
                if eps <= 0.0 {
                    return Err(OptimError::InvalidSpec("eps must be > 0".into()));
                }
                Ok(())
            }
            OptimizerSpec::RmsProp { decay, momentum, eps, .. } => {
                check_unit("decay", decay)?;
                check_unit("momentum", momentum)?;
                if eps <= 0.0 {
                    return Err(OptimError::InvalidSpec("eps must be > 0".into()));
                }
                Ok(())
            }
        }
    }
}

enum Buffers<T> {
    None,
    Velocity(Vec<T>),
    Moments { m1: Vec<T>, m2: Vec<T> },
    Accumulator(Vec<T>),
    RmsProp { sq: Vec<T>, vel: Vec<T> },
}

/// Per-worker optimizer state; one instance per worker per run.
pub struct OptimizerState<T> {
    spec: OptimizerSpec,
    step_count: u64,
    buffers: Buffers<T>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(spec: &OptimizerSpec, dim: usize) -> Self {
        let buffers = match spec {
            OptimizerSpec::Sgd { .. } => Buffers::None,
            OptimizerSpec::Momentum { .. } => Buffers::Velocity(vec![T::zero(); dim]),
            OptimizerSpec::Adam { .. } => Buffers::Moments {
                m1: vec![T::zero(); dim],
                m2: vec![T::zero(); dim],
            },
            OptimizerSpec::Adagrad { .. } => Buffers::Accumulator(vec![T::zero(); dim]),
            OptimizerSpec::RmsProp { .. } => Buffers::RmsProp {
                sq: vec![T::zero(); dim],
                vel: vec![T::zero(); dim],
            },
        };
        Self {
            spec: spec.clone(),
            step_count: 0,
            buffers,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Transform a dense gradient into the additive parameter delta,
    /// mutating the per-worker state. `lr_override` replaces the configured
    /// learning rate for this single step (used by scheduled stepsizes).
    pub fn apply(&mut self, grad: &[T], lr_override: Option<T>) -> Result<Vec<T>, OptimError> {
        self.step_count += 1;
        let lr = lr_override.unwrap_or_else(|| cast(self.spec.lr()));
        let mut delta = vec![T::zero(); grad.len()];
        match (&self.spec, &mut self.buffers) {
            (OptimizerSpec::Sgd { .. }, Buffers::None) => {
                for (d, &g) in delta.iter_mut().zip(grad) {
                    *d = -lr * g;
                }
            }
            (OptimizerSpec::Momentum { gamma, .. }, Buffers::Velocity(vel)) => {
                let gamma: T = cast(*gamma);
                for ((d, v), &g) in delta.iter_mut().zip(vel.iter_mut()).zip(grad) {
                    *v = gamma * *v + g;
                    *d = -lr * *v;
                }
            }
            (OptimizerSpec::Adam { beta1, beta2, eps, .. }, Buffers::Moments { m1, m2 }) => {
                let b1: T = cast(*beta1);
                let b2: T = cast(*beta2);
                let eps: T = cast(*eps);
                let one = T::one();
                let t = self.step_count as i32;
                let corr1 = one - b1.powi(t);
                let corr2 = one - b2.powi(t);
                for (i, &g) in grad.iter().enumerate() {
                    m1[i] = b1 * m1[i] + (one - b1) * g;
                    m2[i] = b2 * m2[i] + (one - b2) * g * g;
                    let m_hat = m1[i] / corr1;
                    let v_hat = m2[i] / corr2;
                    delta[i] = -lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            (OptimizerSpec::Adagrad { eps, .. }, Buffers::Accumulator(acc)) => {
                let eps: T = cast(*eps);
                for (i, &g) in grad.iter().enumerate() {
                    acc[i] += g * g;
                    delta[i] = -lr * g / (acc[i].sqrt() + eps);
                }
            }
            (OptimizerSpec::RmsProp { decay, momentum, eps, .. }, Buffers::RmsProp { sq, vel }) => {
                let decay: T = cast(*decay);
                let momentum: T = cast(*momentum);
                let eps: T = cast(*eps);
                let one = T::one();
                for (i, &g) in grad.iter().enumerate() {
                    sq[i] = decay * sq[i] + (one - decay) * g * g;
                    // eps sits inside the root
                    let step = lr * g / (sq[i] + eps).sqrt();
                    vel[i] = momentum * vel[i] + step;
                    delta[i] = -vel[i];
                }
            }
            _ => unreachable!("spec/buffer mismatch"),
        }
        if delta.iter().any(|d| !d.is_finite()) {
            return Err(OptimError::NonFinite(self.spec.kind_name()));
        }
        Ok(delta)
    }

    /// Sparse path: SGD only. Scales present coordinates by -lr; absent
    /// coordinates stay absent.
    pub fn apply_sparse(
        &mut self,
        grad: &[(usize, T)],
        lr_override: Option<T>,
    ) -> Result<Vec<(usize, T)>, OptimError> {
        if !self.spec.is_stateless() {
            return Err(OptimError::UnsupportedOptimizer(self.spec.kind_name()));
        }
        self.step_count += 1;
        let lr = lr_override.unwrap_or_else(|| cast(self.spec.lr()));
        let out: Vec<(usize, T)> = grad.iter().map(|&(i, g)| (i, -lr * g)).collect();
        if out.iter().any(|(_, d)| !d.is_finite()) {
            return Err(OptimError::NonFinite("sgd"));
        }
        Ok(out)
    }

    /// Dispatch on the delta representation.
    pub fn apply_delta(
        &mut self,
        grad: &ParamDelta<T>,
        lr_override: Option<T>,
    ) -> Result<ParamDelta<T>, OptimError> {
        match grad {
            ParamDelta::Dense(g) => Ok(ParamDelta::Dense(self.apply(g, lr_override)?)),
            ParamDelta::Sparse(g) => Ok(ParamDelta::Sparse(self.apply_sparse(g, lr_override)?)),
        }
    }
}
