use std::collections::HashMap;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use super::KernelError;
use crate::num::Scalar;
use crate::rng::{stream_rng, Stream};

pub const CHECKPOINT_FORMAT: &str = "hgs-params";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Index of a parameter inside its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    Uniform { fan_in: usize },
    Ones,
    Zeros,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Entry<S> {
    name: String,
    value: Tensor2<S>,
    m: Tensor2<S>,
    v: Tensor2<S>,
}

/// Named trainable matrices addressed by [`ParamId`] or by a flat index
/// running over all scalars in insertion order.
#[derive(Debug, Clone)]
pub struct ParameterStore<S> {
    entries: Vec<Entry<S>>,
    by_name: HashMap<String, usize>,
    offsets: Vec<usize>,
    seed: u64,
    step: u64,
    meta: serde_json::Value,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
            offsets: vec![0],
            seed,
            step: 0,
            meta: serde_json::Value::Null,
        }
    }

    /// Registers a parameter. Its initial values depend only on the store
    /// seed and the registration order.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<ParamId, KernelError> {
        if self.by_name.contains_key(name) {
            return Err(KernelError::DuplicateParameter(name.to_string()));
        }
        let idx = self.entries.len();
        let value = match init {
            Init::Zeros => Tensor2::zeros(rows, cols),
            Init::Ones => Tensor2::filled(rows, cols, S::one()),
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng = stream_rng(self.seed, Stream::Init, idx as u64);
                Tensor2::from_fn(rows, cols, |_, _| S::of(rng.gen_range(-bound..=bound)))
            }
        };
        self.entries.push(Entry {
            name: name.to_string(),
            m: Tensor2::zeros(rows, cols),
            v: Tensor2::zeros(rows, cols),
            value,
        });
        self.by_name.insert(name.to_string(), idx);
        let end = self.offsets[idx] + rows * cols;
        self.offsets.push(end);
        Ok(ParamId(idx))
    }

    pub fn id(&self, name: &str) -> Result<ParamId, KernelError> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| KernelError::UnknownParameter(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor2<S> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2<S> {
        &mut self.entries[id.0].value
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.meta
    }

    pub fn set_meta(&mut self, meta: serde_json::Value) {
        self.meta = meta;
    }

    /// Number of parameter matrices.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        *self.offsets.last().expect("offsets start at 0")
    }

    fn locate(&self, flat: usize) -> (usize, usize) {
        let idx = self.offsets.partition_point(|&o| o <= flat) - 1;
        (idx, flat - self.offsets[idx])
    }

    /// Parameter owning flat index `flat`, with the offset inside it.
    pub fn locate_flat(&self, flat: usize) -> (ParamId, usize) {
        let (i, o) = self.locate(flat);
        (ParamId(i), o)
    }

    pub fn get_flat(&self, flat: usize) -> S {
        let (i, o) = self.locate(flat);
        self.entries[i].value.data()[o]
    }

    pub fn set_flat(&mut self, flat: usize, x: S) {
        let (i, o) = self.locate(flat);
        self.entries[i].value.data_mut()[o] = x;
    }

    /// One Adam update; the step counter advances before bias correction.
    pub fn adam_step(&mut self, grads: &ParamGrads<S>, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::of(cfg.beta1);
        let b2 = S::of(cfg.beta2);
        let lr = S::of(cfg.lr);
        let eps = S::of(cfg.eps);
        let c1 = S::one() - b1.powi(t);
        let c2 = S::one() - b2.powi(t);
        for (e, g) in self.entries.iter_mut().zip(&grads.grads) {
            let data = e.value.data_mut();
            let m = e.m.data_mut();
            let v = e.v.data_mut();
            for ((x, &gi), (mi, vi)) in data.iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = b1 * *mi + (S::one() - b1) * gi;
                *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x = *x - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            step: self.step,
            meta: self.meta.clone(),
            params: self
                .entries
                .iter()
                .map(|e| CheckpointEntry {
                    name: e.name.clone(),
                    rows: e.value.rows(),
                    cols: e.value.cols(),
                    values: e.value.to_f64_vec(),
                    adam_m: e.m.to_f64_vec(),
                    adam_v: e.v.to_f64_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, KernelError> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(KernelError::Checkpoint(format!(
                "unsupported format {} version {}",
                ck.format, ck.version
            )));
        }
        let mut store = Self::new(ck.seed);
        store.step = ck.step;
        store.meta = ck.meta.clone();
        for p in &ck.params {
            let id = store.add(&p.name, p.rows, p.cols, Init::Zeros)?;
            let conv = |v: &[f64], what: &str| {
                Tensor2::from_f64(p.rows, p.cols, v)
                    .map_err(|e| KernelError::Checkpoint(format!("{} {what}: {e}", p.name)))
            };
            let e = &mut store.entries[id.0];
            e.value = conv(&p.values, "values")?;
            e.m = conv(&p.adam_m, "adam_m")?;
            e.v = conv(&p.adam_v, "adam_v")?;
            if !e.value.is_finite() {
                return Err(KernelError::Checkpoint(format!("{} has non-finite values", p.name)));
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), KernelError> {
        let text = serde_json::to_string(&self.to_checkpoint())
            .map_err(|e| KernelError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| KernelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, KernelError> {
        let text = std::fs::read_to_string(path).map_err(|source| KernelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| KernelError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint(&ck)
    }
}

/// Checkpoint file layout. Values are stored as JSON numbers in row-major
/// order; `f64` round-trips exactly through serde_json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub step: u64,
    pub meta: serde_json::Value,
    pub params: Vec<CheckpointEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

/// Gradient buffers shaped like a store's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<S> {
    grads: Vec<Tensor2<S>>,
}

impl<S: Scalar> ParamGrads<S> {
    pub fn zeros_like(store: &ParameterStore<S>) -> Self {
        Self {
            grads: store
                .entries
                .iter()
                .map(|e| Tensor2::zeros(e.value.rows(), e.value.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor2<S> {
        &self.grads[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor2<S>) {
        self.grads[id.0].add_assign(g);
    }

    pub fn add(&mut self, other: &Self) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: S) {
        for g in &mut self.grads {
            g.scale_assign(s);
        }
    }

    pub fn norm(&self) -> S {
        self.grads.iter().fold(S::zero(), |a, g| a + g.norm_sq()).sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_norm(&mut self, max_norm: S) -> S {
        let n = self.norm();
        if n > max_norm && n > S::zero() {
            self.scale(max_norm / n);
        }
        n
    }

    pub fn flat(&self) -> Vec<S> {
        self.grads.iter().flat_map(|g| g.data().iter().copied()).collect()
    }

    /// Fails on the first parameter whose gradient is NaN or infinite.
    pub fn check_finite(&self, store: &ParameterStore<S>) -> Result<(), KernelError> {
        match self.grads.iter().position(|g| !g.is_finite()) {
            Some(i) => Err(KernelError::NonFinite {
                name: store.entries[i].name.clone(),
            }),
            None => Ok(()),
        }
    }
}
