//! REINFORCE training with a self-critical greedy-rollout baseline.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{rollout, rollout_on_tape, DecodeMode, PolicyError};
use crate::instance::{generate_instance, Instance, InstanceError, Time};
use crate::kernel::{AdamConfig, Graph, KernelError, ParamGrads};
use crate::model::{ModelConfig, Policy};
use crate::num::Scalar;
use crate::rng::{derive_seed, stream_rng, Rng, Stream};

/// Rollouts per worker task. Fixed so that gradient summation order, and
/// hence the result, does not depend on the thread count.
const CHUNK: usize = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shape {
    pub n: usize,
    pub m: usize,
    pub v: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Gradient updates per epoch; each update consumes one batch.
    pub episodes_per_epoch: usize,
    pub batch_size: usize,
    /// Training instances are regenerated every `refresh` epochs.
    pub refresh: usize,
    pub shape: Shape,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub validation_count: usize,
    /// Updates between validation points.
    pub validation_period: usize,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    /// Continue from a saved policy instead of a fresh initialization.
    pub resume: Option<PathBuf>,
    /// Wallclock limit; stopping on it makes the run timing dependent.
    pub time_budget_s: Option<f64>,
    /// Return and checkpoint the policy with the lowest validation greedy
    /// mean seen so far instead of the last one.
    pub keep_best: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 1000,
            episodes_per_epoch: 1000,
            batch_size: 50,
            refresh: 20,
            shape: Shape { n: 10, m: 6, v: 6 },
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            clip_norm: 1.0,
            seed: 0,
            validation_count: 10,
            validation_period: 100,
            checkpoint: None,
            log: None,
            resume: None,
            time_budget_s: None,
            keep_best: false,
            model: ModelConfig::reference(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.refresh == 0 {
            return bad("refresh must be at least 1");
        }
        if self.validation_period == 0 {
            return bad("validation_period must be at least 1");
        }
        if self.validation_count == 0 {
            return bad("validation_count must be at least 1");
        }
        if self.shape.n == 0 || self.shape.m == 0 || self.shape.v == 0 {
            return bad("shape dimensions must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.clip_norm > 0.0) {
            return bad("eps and clip_norm must be positive");
        }
        self.model
            .validate()
            .map_err(|e| TrainError::Config(format!("model: {e}")))
    }

    pub fn total_updates(&self) -> usize {
        self.epochs * self.episodes_per_epoch
    }
}

/// Relative gap in percent of `c` above `best`.
pub fn gap(c: f64, best: f64) -> Result<f64, TrainError> {
    if !(best > 0.0) {
        return Err(TrainError::Config(format!("gap reference must be positive, got {best}")));
    }
    Ok((c / best - 1.0) * 100.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSummary {
    pub makespans: Vec<Time>,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
}

impl ValidationSummary {
    pub fn from_makespans(makespans: Vec<Time>) -> Self {
        let mean = makespans.iter().map(|&c| c as f64).sum::<f64>() / makespans.len().max(1) as f64;
        let mut sorted = makespans.clone();
        sorted.sort_unstable();
        let pct = |q: f64| -> f64 {
            if sorted.is_empty() {
                return f64::NAN;
            }
            // nearest rank
            let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
            sorted[rank - 1] as f64
        };
        Self {
            mean,
            p50: pct(0.5),
            p90: pct(0.9),
            makespans,
        }
    }
}

/// Greedy (or sampled, with per-instance streams from `seed`) makespans.
pub fn validate<S: Scalar>(
    policy: &Policy<S>,
    instances: &[Instance],
    mode: DecodeMode,
    seed: u64,
) -> Result<ValidationSummary, TrainError> {
    let makespans = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let mut rng = stream_rng(seed, Stream::Sampling, i as u64);
            rollout(inst, policy, mode, &mut rng).map(|t| t.makespan)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ValidationSummary::from_makespans(makespans))
}

/// Instances generated from named sub-streams of `seed`.
pub fn instance_batch(shape: Shape, seed: u64, stream: Stream, first: u64, count: usize) -> Result<Vec<Instance>, TrainError> {
    (0..count as u64)
        .map(|i| generate_instance(shape.n, shape.m, shape.v, derive_seed(seed, stream, first + i)))
        .map(|r| r.map_err(TrainError::from))
        .collect()
}

#[derive(Debug, Clone)]
pub struct BatchGradient<S> {
    /// Gradient of `-(1/B) sum_b A_b log pi(tau_b)`.
    pub grads: ParamGrads<S>,
    pub sampled: Vec<Time>,
    pub greedy: Vec<Time>,
}

/// Pairs a sampled and a greedy rollout per instance and accumulates the
/// policy-gradient loss. `advantage` overrides `C_greedy - C_sampled`.
pub fn batch_gradient<S: Scalar>(
    policy: &Policy<S>,
    instances: &[Instance],
    rngs: Vec<Rng>,
    advantage: Option<f64>,
) -> Result<BatchGradient<S>, TrainError> {
    assert_eq!(instances.len(), rngs.len());
    let b = instances.len() as f64;
    let jobs: Vec<(&Instance, Rng)> = instances.iter().zip(rngs).collect();
    let chunks: Vec<_> = jobs
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<_, TrainError> {
            let mut grads = ParamGrads::zeros_like(&policy.store);
            let mut pairs = Vec::with_capacity(chunk.len());
            for (inst, rng) in chunk {
                let mut rng = rng.clone();
                let mut g = Graph::new();
                let (sampled, logp) = rollout_on_tape(&mut g, inst, policy, DecodeMode::Sample, &mut rng, None)?;
                let greedy = rollout(inst, policy, DecodeMode::Greedy, &mut rng)?;
                let a = advantage.unwrap_or((greedy.makespan - sampled.makespan) as f64);
                if a != 0.0 {
                    g.backward_into(logp, S::of(-a / b), &mut grads)?;
                }
                pairs.push((sampled.makespan, greedy.makespan));
            }
            Ok((grads, pairs))
        })
        .collect::<Result<_, _>>()?;
    let mut grads = ParamGrads::zeros_like(&policy.store);
    let mut sampled = Vec::with_capacity(instances.len());
    let mut greedy = Vec::with_capacity(instances.len());
    for (g, pairs) in chunks {
        grads.add(&g);
        for (s, r) in pairs {
            sampled.push(s);
            greedy.push(r);
        }
    }
    Ok(BatchGradient { grads, sampled, greedy })
}

/// Clips, checks and applies one Adam update. Returns the pre-clip norm.
pub fn apply_update<S: Scalar>(
    policy: &mut Policy<S>,
    mut grads: ParamGrads<S>,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    grads.check_finite(&policy.store)?;
    let norm = grads.clip_norm(S::of(cfg.clip_norm)).as_f64();
    policy.store.adam_step(&grads, &cfg.adam());
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    /// Updates completed when the row was recorded.
    pub episode: usize,
    pub mean_greedy_makespan: f64,
    pub mean_sampled_makespan: f64,
    /// Pre-clip norm of the latest update; zero before the first.
    pub grad_norm: f64,
    pub wallclock: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "episode,mean_greedy_makespan,mean_sampled_makespan,grad_norm,wallclock";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.3}",
                r.episode, r.mean_greedy_makespan, r.mean_sampled_makespan, r.grad_norm, r.wallclock
            );
        }
        out
    }

    /// Rows without the wallclock column, which is the only
    /// nondeterministic field.
    pub fn deterministic_rows(&self) -> Vec<(usize, f64, f64, f64)> {
        self.rows
            .iter()
            .map(|r| (r.episode, r.mean_greedy_makespan, r.mean_sampled_makespan, r.grad_norm))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub policy: Policy<S>,
    /// Episode at which the returned policy was recorded.
    pub best_episode: usize,
    pub log: TrainLog,
    pub updates: usize,
    /// Set when the time budget ended the run early.
    pub stopped_early: bool,
}

pub fn train<S: Scalar>(cfg: &TrainConfig) -> Result<TrainOutcome<S>, TrainError> {
    train_with_progress(cfg, |_| {})
}

/// Like [`train`], calling `progress` after each validation point.
pub fn train_with_progress<S: Scalar>(
    cfg: &TrainConfig,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainOutcome<S>, TrainError> {
    cfg.validate()?;
    let started = Instant::now();
    let mut policy = match &cfg.resume {
        Some(path) => Policy::<S>::load(path)?,
        None => Policy::<S>::new(cfg.model, derive_seed(cfg.seed, Stream::Init, 0))?,
    };
    let validation = instance_batch(cfg.shape, cfg.seed, Stream::Validation, 0, cfg.validation_count)?;
    let first = policy.store.step() as usize;
    let last = first + cfg.total_updates();
    let b = cfg.batch_size;

    let mut log = TrainLog::default();
    let mut grad_norm = 0.0;
    let mut batch: Option<(usize, Vec<Instance>)> = None;
    let mut stopped_early = false;
    let mut best: Option<(usize, f64, Policy<S>)> = None;
    let mut record = |policy: &Policy<S>, episode: usize, grad_norm: f64, log: &mut TrainLog| -> Result<(), TrainError> {
        let greedy = validate(policy, &validation, DecodeMode::Greedy, 0)?;
        let sample_seed = derive_seed(cfg.seed, Stream::Validation, u64::MAX - episode as u64);
        let sampled = validate(policy, &validation, DecodeMode::Sample, sample_seed)?;
        let row = LogRow {
            episode,
            mean_greedy_makespan: greedy.mean,
            mean_sampled_makespan: sampled.mean,
            grad_norm,
            wallclock: started.elapsed().as_secs_f64(),
        };
        progress(&row);
        log.rows.push(row);
        if let Some(path) = &cfg.log {
            std::fs::write(path, log.to_csv()).map_err(|source| TrainError::Io {
                path: path.clone(),
                source,
            })?;
        }
        let improved = best.as_ref().is_none_or(|b| greedy.mean < b.1);
        if cfg.keep_best && improved {
            best = Some((episode, greedy.mean, policy.clone()));
        }
        if let Some(path) = &cfg.checkpoint {
            match &best {
                Some((_, _, kept)) if cfg.keep_best => kept.save(path)?,
                _ => policy.save(path)?,
            }
        }
        Ok(())
    };

    record(&policy, first, grad_norm, &mut log)?;
    let mut t = first;
    while t < last {
        let epoch = t / cfg.episodes_per_epoch.max(1);
        let generation = epoch / cfg.refresh;
        if batch.as_ref().map(|(gen, _)| *gen) != Some(generation) {
            let insts = instance_batch(cfg.shape, cfg.seed, Stream::Generation, (generation * b) as u64, b)?;
            batch = Some((generation, insts));
        }
        let instances = &batch.as_ref().expect("batch generated").1;
        let rngs = (0..b)
            .map(|i| stream_rng(cfg.seed, Stream::Sampling, (t * b + i) as u64))
            .collect();
        let bg = batch_gradient(&policy, instances, rngs, None)?;
        grad_norm = apply_update(&mut policy, bg.grads, cfg)?;
        t += 1;
        let over_budget = cfg
            .time_budget_s
            .is_some_and(|limit| started.elapsed().as_secs_f64() >= limit);
        if (t - first).is_multiple_of(cfg.validation_period) || t == last || over_budget {
            record(&policy, t, grad_norm, &mut log)?;
        }
        if over_budget && t < last {
            stopped_early = true;
            break;
        }
    }
    let best_episode = match best {
        Some((episode, _, kept)) => {
            policy = kept;
            episode
        }
        None => t,
    };
    Ok(TrainOutcome {
        policy,
        best_episode,
        log,
        updates: t - first,
        stopped_early,
    })
}
