//! Experiment configuration: a flat `key = value` text format with dotted
//! section keys, parsed into a typed config with workload construction and
//! canonical re-serialization. Unknown keys are rejected so typos surface
//! as config errors instead of silently ignored settings.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::coherence::TheoremSchedule;
use crate::delay::{match_mean_geometric, DelaySpec};
use crate::metrics::{ConvergenceTarget, Direction};
use crate::optim::OptimizerSpec;
use crate::param::fnv1a_str;
use crate::scalar::Scalar;
use crate::simcore::{ProbeSettings, RunSettings, SimSettings};
use crate::workloads::{
    data, DnnWorkload, LdaWorkload, MfWorkload, NetSpec, QuadraticWorkload, VaeSpec, VaeWorkload,
    Workload,
};

/// Environment variable naming the root directory for file-backed datasets.
pub const DATA_DIR_ENV: &str = "STALESIM_DATA_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
    #[error("{origin} line {line}: {message}")]
    Parse {
        origin: String,
        line: usize,
        message: String,
    },
    #[error("missing required key {0:?}")]
    Missing(String),
    #[error("key {key:?}: {message}")]
    Invalid { key: String, message: String },
    #[error("unknown keys: {0}")]
    UnknownKeys(String),
    #[error("dataset: {0}")]
    Data(#[from] data::DataError),
}

struct KvSource {
    origin: String,
    map: BTreeMap<String, String>,
    consumed: RefCell<BTreeSet<String>>,
}

impl KvSource {
    fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    origin: origin.to_string(),
                    line: lineno + 1,
                    message: format!("expected `key = value`, got {raw:?}"),
                });
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if map.insert(key.clone(), value).is_some() {
                return Err(ConfigError::Parse {
                    origin: origin.to_string(),
                    line: lineno + 1,
                    message: format!("duplicate key {key:?}"),
                });
            }
        }
        Ok(Self {
            origin: origin.to_string(),
            map,
            consumed: RefCell::new(BTreeSet::new()),
        })
    }

    fn get(&self, key: &str) -> Option<&str> {
        let v = self.map.get(key).map(String::as_str);
        if v.is_some() {
            self.consumed.borrow_mut().insert(key.to_string());
        }
        v
    }

    fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| ConfigError::Invalid {
                key: key.to_string(),
                message: format!("cannot parse {raw:?}"),
            }),
        }
    }

    fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        Ok(self.parse_opt(key)?.unwrap_or(default))
    }

    fn list_or<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<T>().map_err(|_| ConfigError::Invalid {
                        key: key.to_string(),
                        message: format!("cannot parse list element {s:?}"),
                    })
                })
                .collect(),
        }
    }

    fn reject_unknown(&self) -> Result<(), ConfigError> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<String> = self
            .map
            .keys()
            .filter(|k| !consumed.contains(*k))
            .cloned()
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::UnknownKeys(format!(
                "{} (in {})",
                unknown.join(", "),
                self.origin
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum WorkloadCfg {
    Dnn {
        depth: usize,
        width: usize,
    },
    Vae {
        depth: usize,
        width: usize,
        latent_dim: usize,
    },
    Mf {
        rank: usize,
        lambda: f64,
    },
    Lda {
        topics: usize,
        alpha: f64,
        beta: f64,
    },
    Quadratic {
        dim: usize,
        eig_min: f64,
        eig_max: f64,
    },
}

impl WorkloadCfg {
    pub fn kind_name(&self) -> &'static str {
        match self {
            WorkloadCfg::Dnn { depth: 0, .. } => "mlr",
            WorkloadCfg::Dnn { .. } => "dnn",
            WorkloadCfg::Vae { .. } => "vae",
            WorkloadCfg::Mf { .. } => "mf",
            WorkloadCfg::Lda { .. } => "lda",
            WorkloadCfg::Quadratic { .. } => "quadratic",
        }
    }

    pub fn label(&self) -> String {
        match self {
            WorkloadCfg::Dnn { depth: 0, .. } => "mlr".into(),
            WorkloadCfg::Dnn { depth, .. } => format!("dnn-d{depth}"),
            WorkloadCfg::Vae { depth, .. } => format!("vae-d{depth}"),
            WorkloadCfg::Mf { .. } => "mf".into(),
            WorkloadCfg::Lda { topics, .. } => format!("lda-k{topics}"),
            WorkloadCfg::Quadratic { .. } => "quadratic".into(),
        }
    }

    fn uses_optimizer(&self) -> bool {
        !matches!(self, WorkloadCfg::Lda { .. })
    }

    fn sparse_updates(&self) -> bool {
        matches!(self, WorkloadCfg::Mf { .. } | WorkloadCfg::Lda { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Mnist,
    Movielens,
    Corpus,
}

impl DataSource {
    fn name(self) -> &'static str {
        match self {
            DataSource::Synthetic => "synthetic",
            DataSource::Mnist => "mnist",
            DataSource::Movielens => "movielens",
            DataSource::Corpus => "corpus",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataCfg {
    pub source: DataSource,
    pub path: Option<String>,
    pub seed: u64,
    // Synthetic classifier / reconstruction inputs.
    pub classes: usize,
    pub features: usize,
    pub train: usize,
    pub test: usize,
    pub separation: f64,
    pub noise: f64,
    pub xor_mode: bool,
    pub latent: usize,
    // Synthetic ratings.
    pub rows: usize,
    pub cols: usize,
    pub observed: usize,
    // Synthetic corpus.
    pub docs: usize,
    pub vocab: usize,
    pub doc_len: usize,
    pub gen_topics: usize,
    pub gen_alpha: f64,
    pub gen_beta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DelayKind {
    Uniform,
    Geometric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DelayCfg {
    pub kind: DelayKind,
    /// Maximum staleness for the uniform law; also the mean-matching target
    /// and reported label for the geometric law.
    pub staleness: u32,
    pub p_straggler: f64,
    pub stragglers: usize,
    pub cap: u32,
    pub p_fast: Option<f64>,
}

impl DelayCfg {
    pub fn to_spec(&self, n_workers: usize) -> Result<DelaySpec, ConfigError> {
        let spec = match self.kind {
            DelayKind::Uniform => DelaySpec::UniformBounded {
                max_staleness: self.staleness,
            },
            DelayKind::Geometric => {
                let p_fast = match self.p_fast {
                    Some(p) => p,
                    None => match_mean_geometric(
                        self.staleness,
                        self.p_straggler,
                        self.stragglers,
                        n_workers,
                    )
                    .map_err(|e| ConfigError::Invalid {
                        key: "delay.staleness".into(),
                        message: e.to_string(),
                    })?,
                };
                DelaySpec::GeometricStraggler {
                    p_straggler: self.p_straggler,
                    p_fast,
                    straggler_count: self.stragglers,
                    cap: self.cap,
                }
            }
        };
        spec.validate(n_workers).map_err(|e| ConfigError::Invalid {
            key: "delay".into(),
            message: e.to_string(),
        })?;
        Ok(spec)
    }
}

/// Raw optimizer keys before per-kind defaults are applied; kept so sweeps
/// over optimizers rebuild each kind from its own Table defaults.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerOverrides {
    pub kind: Option<String>,
    pub lr: Option<f64>,
    pub gamma: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub decay: Option<f64>,
    pub momentum: Option<f64>,
}

impl OptimizerOverrides {
    fn is_empty(&self) -> bool {
        self == &OptimizerOverrides::default()
    }

    /// Materialize a spec for the given kind, filling unset values with the
    /// defaults: sgd lr 0.01 (0.005 for MF), momentum lr 0.01 / gamma 0.9,
    /// adam lr 0.001 / betas 0.9, 0.999, adagrad lr 0.01, rmsprop lr 0.01 /
    /// decay 0.9 / momentum 0.
    fn materialize(&self, kind: &str, workload: &WorkloadCfg) -> Result<OptimizerSpec, ConfigError> {
        let sgd_default_lr = match workload {
            WorkloadCfg::Mf { .. } => 0.005,
            _ => 0.01,
        };
        let spec = match kind {
            "sgd" => OptimizerSpec::Sgd {
                lr: self.lr.unwrap_or(sgd_default_lr),
            },
            "momentum" => OptimizerSpec::Momentum {
                lr: self.lr.unwrap_or(0.01),
                gamma: self.gamma.unwrap_or(0.9),
            },
            "adam" => OptimizerSpec::Adam {
                lr: self.lr.unwrap_or(0.001),
                beta1: self.beta1.unwrap_or(0.9),
                beta2: self.beta2.unwrap_or(0.999),
                eps: self.eps.unwrap_or(1e-8),
            },
            "adagrad" => OptimizerSpec::Adagrad {
                lr: self.lr.unwrap_or(0.01),
                eps: self.eps.unwrap_or(1e-8),
            },
            "rmsprop" => OptimizerSpec::RmsProp {
                lr: self.lr.unwrap_or(0.01),
                decay: self.decay.unwrap_or(0.9),
                momentum: self.momentum.unwrap_or(0.0),
                eps: self.eps.unwrap_or(1e-10),
            },
            other => {
                return Err(ConfigError::Invalid {
                    key: "optimizer.kind".into(),
                    message: format!("unknown optimizer {other:?}"),
                })
            }
        };
        spec.validate().map_err(|e| ConfigError::Invalid {
            key: "optimizer".into(),
            message: e.to_string(),
        })?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeCfg {
    pub enabled: bool,
    pub interval: u64,
    pub lags: u32,
    pub subset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoremCfg {
    pub mu: f64,
    pub lipschitz: Option<f64>,
    pub sigma_sq: Option<f64>,
    pub f_inf: f64,
    pub estimate: bool,
    pub power_iters: usize,
    pub var_samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepCfg {
    pub staleness: Vec<u32>,
    pub workers: Vec<usize>,
    pub optimizers: Vec<String>,
    pub depths: Vec<usize>,
}

impl SweepCfg {
    pub fn is_empty(&self) -> bool {
        self.staleness.is_empty()
            && self.workers.is_empty()
            && self.optimizers.is_empty()
            && self.depths.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub workload: WorkloadCfg,
    pub data: DataCfg,
    pub opt_overrides: OptimizerOverrides,
    pub optimizer: Option<OptimizerSpec>,
    pub delay: DelayCfg,
    pub workers: usize,
    pub seeds: Vec<u64>,
    pub batch_size: Option<usize>,
    pub budget: u64,
    pub eval_interval: u64,
    pub halt_on_target: bool,
    pub target: Option<ConvergenceTarget>,
    pub probe: ProbeCfg,
    pub theorem: Option<TheoremCfg>,
    pub sweep: SweepCfg,
    pub output_dir: String,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let kv = KvSource::parse(text, origin)?;

        let kind = kv
            .get("workload.kind")
            .ok_or_else(|| ConfigError::Missing("workload.kind".into()))?
            .to_string();
        let workload = match kind.as_str() {
            "mlr" => WorkloadCfg::Dnn {
                depth: 0,
                width: kv.parse_or("workload.width", 256usize)?,
            },
            "dnn" => WorkloadCfg::Dnn {
                depth: kv.parse_or("workload.depth", 1usize)?,
                width: kv.parse_or("workload.width", 256usize)?,
            },
            "vae" => WorkloadCfg::Vae {
                depth: kv.parse_or("workload.depth", 1usize)?,
                width: kv.parse_or("workload.width", 256usize)?,
                latent_dim: kv.parse_or("workload.latent_dim", 32usize)?,
            },
            "mf" => WorkloadCfg::Mf {
                rank: kv.parse_or("workload.rank", 5usize)?,
                lambda: kv.parse_or("workload.lambda", 0.0001f64)?,
            },
            "lda" => WorkloadCfg::Lda {
                topics: kv.parse_or("workload.topics", 10usize)?,
                alpha: kv.parse_or("workload.alpha", 0.1f64)?,
                beta: kv.parse_or("workload.beta", 0.1f64)?,
            },
            "quadratic" => WorkloadCfg::Quadratic {
                dim: kv.parse_or("workload.dim", 20usize)?,
                eig_min: kv.parse_or("workload.eig_min", 0.1f64)?,
                eig_max: kv.parse_or("workload.eig_max", 1.0f64)?,
            },
            other => {
                return Err(ConfigError::Invalid {
                    key: "workload.kind".into(),
                    message: format!("unknown workload {other:?}"),
                })
            }
        };
        if let WorkloadCfg::Dnn { depth, .. } = &workload {
            if *depth > 6 {
                return Err(ConfigError::Invalid {
                    key: "workload.depth".into(),
                    message: "hidden depth must be 0..=6".into(),
                });
            }
        }
        if let WorkloadCfg::Vae { depth, .. } = &workload {
            if *depth < 1 || *depth > 3 {
                return Err(ConfigError::Invalid {
                    key: "workload.depth".into(),
                    message: "vae depth must be 1..=3".into(),
                });
            }
        }

        let source = match kv.get("data.source").unwrap_or("synthetic") {
            "synthetic" => DataSource::Synthetic,
            "mnist" => DataSource::Mnist,
            "movielens" => DataSource::Movielens,
            "corpus" => DataSource::Corpus,
            other => {
                return Err(ConfigError::Invalid {
                    key: "data.source".into(),
                    message: format!("unknown source {other:?}"),
                })
            }
        };
        let data = DataCfg {
            source,
            path: kv.get("data.path").map(str::to_string),
            seed: kv.parse_or("data.seed", 42u64)?,
            classes: kv.parse_or("data.classes", 10usize)?,
            features: kv.parse_or("data.features", 20usize)?,
            train: kv.parse_or("data.train", 2000usize)?,
            test: kv.parse_or("data.test", 500usize)?,
            separation: kv.parse_or("data.separation", 3.0f64)?,
            noise: kv.parse_or("data.noise", 1.0f64)?,
            xor_mode: kv.parse_or("data.xor", false)?,
            latent: kv.parse_or("data.latent", 4usize)?,
            rows: kv.parse_or("data.rows", 200usize)?,
            cols: kv.parse_or("data.cols", 200usize)?,
            observed: kv.parse_or("data.observed", 8000usize)?,
            docs: kv.parse_or("data.docs", 2000usize)?,
            vocab: kv.parse_or("data.vocab", 1000usize)?,
            doc_len: kv.parse_or("data.doc_len", 50usize)?,
            gen_topics: kv.parse_or("data.gen_topics", 10usize)?,
            gen_alpha: kv.parse_or("data.gen_alpha", 0.1f64)?,
            gen_beta: kv.parse_or("data.gen_beta", 0.1f64)?,
        };

        let opt_overrides = OptimizerOverrides {
            kind: kv.get("optimizer.kind").map(str::to_string),
            lr: kv.parse_opt("optimizer.lr")?,
            gamma: kv.parse_opt("optimizer.gamma")?,
            beta1: kv.parse_opt("optimizer.beta1")?,
            beta2: kv.parse_opt("optimizer.beta2")?,
            eps: kv.parse_opt("optimizer.eps")?,
            decay: kv.parse_opt("optimizer.decay")?,
            momentum: kv.parse_opt("optimizer.momentum")?,
        };
        let optimizer = if workload.uses_optimizer() {
            let kind = opt_overrides.kind.clone().unwrap_or_else(|| "sgd".into());
            Some(opt_overrides.materialize(&kind, &workload)?)
        } else {
            if !opt_overrides.is_empty() {
                return Err(ConfigError::Invalid {
                    key: "optimizer.kind".into(),
                    message: "gibbs-sampled workloads do not use an optimizer".into(),
                });
            }
            None
        };
        if workload.sparse_updates() {
            if let Some(spec) = &optimizer {
                if !spec.is_stateless() {
                    return Err(ConfigError::Invalid {
                        key: "optimizer.kind".into(),
                        message: format!(
                            "{} emits sparse updates; only sgd is supported",
                            workload.label()
                        ),
                    });
                }
            }
        }

        let delay_kind = match kv.get("delay.kind").unwrap_or("uniform") {
            "uniform" => DelayKind::Uniform,
            "geometric" => DelayKind::Geometric,
            other => {
                return Err(ConfigError::Invalid {
                    key: "delay.kind".into(),
                    message: format!("unknown delay kind {other:?}"),
                })
            }
        };
        let delay = DelayCfg {
            kind: delay_kind,
            staleness: kv.parse_or("delay.staleness", 0u32)?,
            p_straggler: kv.parse_or("delay.p_straggler", 0.1f64)?,
            stragglers: kv.parse_or("delay.stragglers", 1usize)?,
            cap: kv.parse_or("delay.cap", 100u32)?,
            p_fast: kv.parse_opt("delay.p_fast")?,
        };

        let workers = kv.parse_or("run.workers", 1usize)?;
        if workers < 1 {
            return Err(ConfigError::Invalid {
                key: "run.workers".into(),
                message: "need at least one worker".into(),
            });
        }
        let seeds: Vec<u64> = kv.list_or("run.seeds", vec![0u64])?;
        if seeds.is_empty() {
            return Err(ConfigError::Invalid {
                key: "run.seeds".into(),
                message: "need at least one seed".into(),
            });
        }

        let target = match kv.parse_opt::<f64>("target.threshold")? {
            None => {
                // Consume the dependent keys so they are not "unknown".
                let _ = kv.get("target.metric");
                let _ = kv.get("target.direction");
                None
            }
            Some(threshold) => {
                let metric = kv
                    .get("target.metric")
                    .map(str::to_string)
                    .unwrap_or_else(|| default_metric(&workload).0.to_string());
                let direction = match kv.get("target.direction") {
                    None => default_metric(&workload).1,
                    Some("at_least") => Direction::AtLeast,
                    Some("at_most") => Direction::AtMost,
                    Some(other) => {
                        return Err(ConfigError::Invalid {
                            key: "target.direction".into(),
                            message: format!("expected at_least or at_most, got {other:?}"),
                        })
                    }
                };
                Some(ConvergenceTarget {
                    metric,
                    threshold,
                    direction,
                })
            }
        };

        let probe = ProbeCfg {
            enabled: kv.parse_or("probe.enabled", false)?,
            interval: kv.parse_or("probe.interval", 50u64)?,
            lags: kv.parse_or("probe.lags", 10u32)?,
            subset: kv.parse_or("probe.subset", 1000usize)?,
        };

        let theorem = match kv.parse_opt::<f64>("theorem.mu")? {
            None => {
                for k in [
                    "theorem.lipschitz",
                    "theorem.sigma_sq",
                    "theorem.f_inf",
                    "theorem.estimate",
                    "theorem.power_iters",
                    "theorem.var_samples",
                ] {
                    if kv.get(k).is_some() {
                        return Err(ConfigError::Invalid {
                            key: k.into(),
                            message: "theorem.* keys need theorem.mu".into(),
                        });
                    }
                }
                None
            }
            Some(mu) => Some(TheoremCfg {
                mu,
                lipschitz: kv.parse_opt("theorem.lipschitz")?,
                sigma_sq: kv.parse_opt("theorem.sigma_sq")?,
                f_inf: kv.parse_or("theorem.f_inf", 0.0f64)?,
                estimate: kv.parse_or("theorem.estimate", true)?,
                power_iters: kv.parse_or("theorem.power_iters", 30usize)?,
                var_samples: kv.parse_or("theorem.var_samples", 20usize)?,
            }),
        };

        let sweep = SweepCfg {
            staleness: kv.list_or("sweep.staleness", Vec::new())?,
            workers: kv.list_or("sweep.workers", Vec::new())?,
            optimizers: match kv.get("sweep.optimizers") {
                None => Vec::new(),
                Some(raw) => raw.split(',').map(|s| s.trim().to_string()).collect(),
            },
            depths: kv.list_or("sweep.depths", Vec::new())?,
        };

        let cfg = Self {
            workload,
            data,
            opt_overrides,
            optimizer,
            delay,
            workers,
            seeds,
            batch_size: kv.parse_opt("run.batch_size")?,
            budget: kv.parse_or("run.budget", 77_824u64)?,
            eval_interval: kv.parse_or("run.eval_interval", 50u64)?,
            halt_on_target: kv.parse_or("run.halt_on_target", true)?,
            target,
            probe,
            theorem,
            sweep,
            output_dir: kv.get("output.dir").unwrap_or("out").to_string(),
        };
        if cfg.eval_interval == 0 {
            return Err(ConfigError::Invalid {
                key: "run.eval_interval".into(),
                message: "must be >= 1".into(),
            });
        }
        // Surface delay-law problems (probability ranges, straggler counts,
        // infeasible mean matching) at parse time.
        cfg.delay.to_spec(cfg.workers)?;
        kv.reject_unknown()?;
        Ok(cfg)
    }

    /// Canonical `key = value` serialization with every effective value
    /// materialized; re-parsing it reproduces this config.
    pub fn canonical_kv(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        match &self.workload {
            WorkloadCfg::Dnn { depth, width } => {
                put("workload.kind", if *depth == 0 { "mlr".into() } else { "dnn".into() });
                if *depth > 0 {
                    put("workload.depth", depth.to_string());
                }
                put("workload.width", width.to_string());
            }
            WorkloadCfg::Vae {
                depth,
                width,
                latent_dim,
            } => {
                put("workload.kind", "vae".into());
                put("workload.depth", depth.to_string());
                put("workload.width", width.to_string());
                put("workload.latent_dim", latent_dim.to_string());
            }
            WorkloadCfg::Mf { rank, lambda } => {
                put("workload.kind", "mf".into());
                put("workload.rank", rank.to_string());
                put("workload.lambda", lambda.to_string());
            }
            WorkloadCfg::Lda {
                topics,
                alpha,
                beta,
            } => {
                put("workload.kind", "lda".into());
                put("workload.topics", topics.to_string());
                put("workload.alpha", alpha.to_string());
                put("workload.beta", beta.to_string());
            }
            WorkloadCfg::Quadratic {
                dim,
                eig_min,
                eig_max,
            } => {
                put("workload.kind", "quadratic".into());
                put("workload.dim", dim.to_string());
                put("workload.eig_min", eig_min.to_string());
                put("workload.eig_max", eig_max.to_string());
            }
        }

        put("data.source", self.data.source.name().into());
        if let Some(path) = &self.data.path {
            put("data.path", path.clone());
        }
        put("data.seed", self.data.seed.to_string());
        if self.data.source == DataSource::Synthetic {
            match &self.workload {
                WorkloadCfg::Dnn { .. } => {
                    put("data.classes", self.data.classes.to_string());
                    put("data.features", self.data.features.to_string());
                    put("data.train", self.data.train.to_string());
                    put("data.test", self.data.test.to_string());
                    put("data.separation", self.data.separation.to_string());
                    put("data.noise", self.data.noise.to_string());
                    put("data.xor", self.data.xor_mode.to_string());
                }
                WorkloadCfg::Vae { .. } => {
                    put("data.features", self.data.features.to_string());
                    put("data.train", self.data.train.to_string());
                    put("data.test", self.data.test.to_string());
                    put("data.noise", self.data.noise.to_string());
                    put("data.latent", self.data.latent.to_string());
                }
                WorkloadCfg::Mf { .. } => {
                    put("data.rows", self.data.rows.to_string());
                    put("data.cols", self.data.cols.to_string());
                    put("data.observed", self.data.observed.to_string());
                    put("data.noise", self.data.noise.to_string());
                }
                WorkloadCfg::Lda { .. } => {
                    put("data.docs", self.data.docs.to_string());
                    put("data.vocab", self.data.vocab.to_string());
                    put("data.doc_len", self.data.doc_len.to_string());
                    put("data.gen_topics", self.data.gen_topics.to_string());
                    put("data.gen_alpha", self.data.gen_alpha.to_string());
                    put("data.gen_beta", self.data.gen_beta.to_string());
                }
                WorkloadCfg::Quadratic { .. } => {}
            }
        }

        match &self.optimizer {
            None => {}
            Some(OptimizerSpec::Sgd { lr }) => {
                put("optimizer.kind", "sgd".into());
                put("optimizer.lr", lr.to_string());
            }
            Some(OptimizerSpec::Momentum { lr, gamma }) => {
                put("optimizer.kind", "momentum".into());
                put("optimizer.lr", lr.to_string());
                put("optimizer.gamma", gamma.to_string());
            }
            Some(OptimizerSpec::Adam {
                lr,
                beta1,
                beta2,
                eps,
            }) => {
                put("optimizer.kind", "adam".into());
                put("optimizer.lr", lr.to_string());
                put("optimizer.beta1", beta1.to_string());
                put("optimizer.beta2", beta2.to_string());
                put("optimizer.eps", eps.to_string());
            }
            Some(OptimizerSpec::Adagrad { lr, eps }) => {
                put("optimizer.kind", "adagrad".into());
                put("optimizer.lr", lr.to_string());
                put("optimizer.eps", eps.to_string());
            }
            Some(OptimizerSpec::RmsProp {
                lr,
                decay,
                momentum,
                eps,
            }) => {
                put("optimizer.kind", "rmsprop".into());
                put("optimizer.lr", lr.to_string());
                put("optimizer.decay", decay.to_string());
                put("optimizer.momentum", momentum.to_string());
                put("optimizer.eps", eps.to_string());
            }
        }

        match self.delay.kind {
            DelayKind::Uniform => {
                put("delay.kind", "uniform".into());
                put("delay.staleness", self.delay.staleness.to_string());
            }
            DelayKind::Geometric => {
                put("delay.kind", "geometric".into());
                put("delay.staleness", self.delay.staleness.to_string());
                put("delay.p_straggler", self.delay.p_straggler.to_string());
                put("delay.stragglers", self.delay.stragglers.to_string());
                put("delay.cap", self.delay.cap.to_string());
                if let Some(p) = self.delay.p_fast {
                    put("delay.p_fast", p.to_string());
                }
            }
        }

        put("run.workers", self.workers.to_string());
        put(
            "run.seeds",
            self.seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        if let Some(b) = self.batch_size {
            put("run.batch_size", b.to_string());
        }
        put("run.budget", self.budget.to_string());
        put("run.eval_interval", self.eval_interval.to_string());
        put("run.halt_on_target", self.halt_on_target.to_string());

        if let Some(target) = &self.target {
            put("target.metric", target.metric.clone());
            put("target.threshold", target.threshold.to_string());
            put(
                "target.direction",
                match target.direction {
                    Direction::AtLeast => "at_least".into(),
                    Direction::AtMost => "at_most".into(),
                },
            );
        }

        put("probe.enabled", self.probe.enabled.to_string());
        put("probe.interval", self.probe.interval.to_string());
        put("probe.lags", self.probe.lags.to_string());
        put("probe.subset", self.probe.subset.to_string());

        if let Some(t) = &self.theorem {
            put("theorem.mu", t.mu.to_string());
            if let Some(l) = t.lipschitz {
                put("theorem.lipschitz", l.to_string());
            }
            if let Some(s) = t.sigma_sq {
                put("theorem.sigma_sq", s.to_string());
            }
            put("theorem.f_inf", t.f_inf.to_string());
            put("theorem.estimate", t.estimate.to_string());
            put("theorem.power_iters", t.power_iters.to_string());
            put("theorem.var_samples", t.var_samples.to_string());
        }

        if !self.sweep.staleness.is_empty() {
            put(
                "sweep.staleness",
                self.sweep
                    .staleness
                    .iter()
                    .map(u32::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        if !self.sweep.workers.is_empty() {
            put(
                "sweep.workers",
                self.sweep
                    .workers
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        if !self.sweep.optimizers.is_empty() {
            put("sweep.optimizers", self.sweep.optimizers.join(","));
        }
        if !self.sweep.depths.is_empty() {
            put(
                "sweep.depths",
                self.sweep
                    .depths
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }

        put("output.dir", self.output_dir.clone());
        out
    }

    /// Stable fingerprint of the effective configuration, excluding the
    /// seed list and output directory (neither changes what is computed).
    pub fn fingerprint(&self) -> String {
        let mut canon = String::new();
        for line in self.canonical_kv().lines() {
            if !line.starts_with("run.seeds") && !line.starts_with("output.dir") {
                canon.push_str(line);
                canon.push('\n');
            }
        }
        format!("{:016x}", fnv1a_str(&canon))
    }

    /// Short collision-resistant id joining traces and summary rows.
    pub fn run_id(&self, seed: u64) -> String {
        format!(
            "{:016x}",
            fnv1a_str(&format!("{}#{}", self.fingerprint(), seed))
        )
    }

    /// Group label for slowdown normalization: configuration minus
    /// staleness and seed.
    pub fn group_label(&self) -> String {
        format!(
            "{}-{}-p{}",
            self.workload.label(),
            self.optimizer
                .as_ref()
                .map_or("none", |o| o.kind_name()),
            self.workers
        )
    }

    /// Construct the workload (loading or generating its dataset).
    pub fn build_workload<T: Scalar>(&self) -> Result<Box<dyn Workload<T>>, ConfigError> {
        let probe_subset = self.probe.subset;
        match &self.workload {
            WorkloadCfg::Dnn { depth, width } => {
                let dataset = match self.data.source {
                    DataSource::Synthetic => {
                        if self.data.xor_mode {
                            data::synth_xor::<T>(
                                self.data.features,
                                self.data.train,
                                self.data.test,
                                self.data.separation / 10.0,
                                self.data.seed,
                            )
                        } else {
                            data::synth_clusters::<T>(
                                self.data.classes,
                                self.data.features,
                                self.data.train,
                                self.data.test,
                                self.data.separation,
                                self.data.noise,
                                self.data.seed,
                            )
                        }
                    }
                    DataSource::Mnist => data::load_mnist::<T>(&self.resolve_path("mnist")?)?,
                    _ => {
                        return Err(ConfigError::Invalid {
                            key: "data.source".into(),
                            message: "classifier workloads need synthetic or mnist data".into(),
                        })
                    }
                };
                let spec = NetSpec {
                    depth: *depth,
                    width: *width,
                    input_dim: dataset.features,
                    output_dim: dataset.classes,
                };
                Ok(Box::new(DnnWorkload::new(spec, Arc::new(dataset), probe_subset)))
            }
            WorkloadCfg::Vae {
                depth,
                width,
                latent_dim,
            } => {
                let dataset = match self.data.source {
                    DataSource::Synthetic => data::synth_latent01::<T>(
                        self.data.features,
                        self.data.latent,
                        self.data.train,
                        self.data.test,
                        self.data.noise,
                        self.data.seed,
                    ),
                    DataSource::Mnist => data::load_mnist::<T>(&self.resolve_path("mnist")?)?,
                    _ => {
                        return Err(ConfigError::Invalid {
                            key: "data.source".into(),
                            message: "vae needs synthetic or mnist data".into(),
                        })
                    }
                };
                let spec = VaeSpec {
                    depth: *depth,
                    width: *width,
                    input_dim: dataset.features,
                    latent_dim: *latent_dim,
                };
                Ok(Box::new(VaeWorkload::new(
                    spec,
                    Arc::new(dataset),
                    probe_subset,
                    self.data.seed ^ 0x5ca1ab1e,
                )))
            }
            WorkloadCfg::Mf { rank, lambda } => {
                let dataset = match self.data.source {
                    DataSource::Synthetic => data::synth_lowrank::<T>(
                        self.data.rows,
                        self.data.cols,
                        *rank,
                        self.data.observed,
                        self.data.noise,
                        self.data.seed,
                    ),
                    DataSource::Movielens => {
                        data::load_movielens::<T>(&self.resolve_path("ratings.dat")?)?
                    }
                    _ => {
                        return Err(ConfigError::Invalid {
                            key: "data.source".into(),
                            message: "mf needs synthetic or movielens data".into(),
                        })
                    }
                };
                if *rank > dataset.rows.min(dataset.cols) {
                    return Err(ConfigError::Invalid {
                        key: "workload.rank".into(),
                        message: format!(
                            "rank {rank} exceeds min dimension {}",
                            dataset.rows.min(dataset.cols)
                        ),
                    });
                }
                Ok(Box::new(MfWorkload::new(
                    *rank,
                    *lambda,
                    Arc::new(dataset),
                    probe_subset,
                )))
            }
            WorkloadCfg::Lda {
                topics,
                alpha,
                beta,
            } => {
                let corpus = match self.data.source {
                    DataSource::Synthetic => data::synth_lda_corpus(
                        self.data.docs,
                        self.data.vocab,
                        self.data.gen_topics,
                        self.data.doc_len,
                        self.data.gen_alpha,
                        self.data.gen_beta,
                        self.data.seed,
                    ),
                    DataSource::Corpus => data::load_corpus(&self.resolve_path("corpus.txt")?)?,
                    _ => {
                        return Err(ConfigError::Invalid {
                            key: "data.source".into(),
                            message: "lda needs synthetic or corpus data".into(),
                        })
                    }
                };
                Ok(Box::new(LdaWorkload::new(
                    Arc::new(corpus),
                    *topics,
                    *alpha,
                    *beta,
                )))
            }
            WorkloadCfg::Quadratic {
                dim,
                eig_min,
                eig_max,
            } => Ok(Box::new(QuadraticWorkload::<T>::new(
                *dim, *eig_min, *eig_max,
            ))),
        }
    }

    fn resolve_path(&self, default_name: &str) -> Result<PathBuf, ConfigError> {
        let raw = self
            .data
            .path
            .clone()
            .unwrap_or_else(|| default_name.to_string());
        let path = PathBuf::from(&raw);
        if path.is_relative() {
            if let Ok(root) = std::env::var(DATA_DIR_ENV) {
                return Ok(PathBuf::from(root).join(path));
            }
        }
        Ok(path)
    }

    /// Package the per-seed run settings for this configuration.
    pub fn run_settings<T: Scalar>(
        &self,
        workload: &dyn Workload<T>,
        seed: u64,
        lr_schedule: Option<TheoremSchedule>,
    ) -> Result<RunSettings, ConfigError> {
        let batch_size = self
            .batch_size
            .unwrap_or_else(|| workload.default_batch_size(self.workers));
        let probe = self.probe.enabled.then(|| ProbeSettings {
            interval: self.probe.interval,
            lags: self.probe.lags,
            window: self.delay.staleness.max(1),
        });
        Ok(RunSettings {
            sim: SimSettings {
                n_workers: self.workers,
                seed,
                batch_size,
                delay_spec: self.delay.to_spec(self.workers)?,
                optimizer: self.optimizer.clone(),
                lr_schedule,
            },
            budget_batches: self.budget,
            eval_interval: self.eval_interval,
            probe,
            target: self.target.clone(),
            halt_on_target: self.halt_on_target,
            run_id: self.run_id(seed),
            fingerprint: self.fingerprint(),
            staleness_label: self.delay.staleness,
        })
    }

    /// Sweep variants, used by the sweep driver.
    pub fn with_staleness(&self, staleness: u32) -> Result<Self, ConfigError> {
        let mut cfg = self.clone();
        cfg.delay.staleness = staleness;
        cfg.delay.p_fast = None; // re-derive mean matching per staleness
        cfg.delay.to_spec(cfg.workers)?;
        Ok(cfg)
    }

    pub fn with_workers(&self, workers: usize) -> Result<Self, ConfigError> {
        let mut cfg = self.clone();
        cfg.workers = workers;
        cfg.delay.to_spec(cfg.workers)?;
        Ok(cfg)
    }

    pub fn with_optimizer_kind(&self, kind: &str) -> Result<Self, ConfigError> {
        let mut cfg = self.clone();
        if !cfg.workload.uses_optimizer() {
            return Err(ConfigError::Invalid {
                key: "sweep.optimizers".into(),
                message: format!("{} has no optimizer axis", cfg.workload.label()),
            });
        }
        cfg.optimizer = Some(cfg.opt_overrides.materialize(kind, &cfg.workload)?);
        if cfg.workload.sparse_updates() && !cfg.optimizer.as_ref().unwrap().is_stateless() {
            return Err(ConfigError::Invalid {
                key: "sweep.optimizers".into(),
                message: format!("{} supports sgd only", cfg.workload.label()),
            });
        }
        Ok(cfg)
    }

    pub fn with_depth(&self, depth: usize) -> Result<Self, ConfigError> {
        let mut cfg = self.clone();
        match &mut cfg.workload {
            WorkloadCfg::Dnn { depth: d, .. } => *d = depth,
            WorkloadCfg::Vae { depth: d, .. } => *d = depth,
            _ => {
                return Err(ConfigError::Invalid {
                    key: "sweep.depths".into(),
                    message: format!("{} has no depth axis", cfg.workload.label()),
                })
            }
        }
        Ok(cfg)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seeds = vec![seed];
        cfg
    }
}

fn default_metric(workload: &WorkloadCfg) -> (&'static str, Direction) {
    match workload {
        WorkloadCfg::Dnn { .. } => ("test_accuracy", Direction::AtLeast),
        WorkloadCfg::Vae { .. } => ("test_loss", Direction::AtMost),
        WorkloadCfg::Mf { .. } => ("train_loss", Direction::AtMost),
        WorkloadCfg::Lda { .. } => ("log_likelihood", Direction::AtLeast),
        WorkloadCfg::Quadratic { .. } => ("objective", Direction::AtMost),
    }
}
