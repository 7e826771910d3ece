//! Named parameter tensors, their optimizers, and the checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "SNCK"
//! version u32      currently 1
//! hlen    u64      byte length of the JSON header
//! header  hlen     UTF-8 JSON, see `CheckpointHeader`
//! data    8·n      f64 values of every tensor, in header order
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every tensor on the tape, as differentiable leaves when
    /// `trainable` is set and as constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t, '_> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars, store: self }
    }

    /// Binds caller-created vars, one per tensor in store order.
    pub fn with_vars<'t>(&self, vars: &[Var<'t>]) -> Bound<'t, '_> {
        assert_eq!(vars.len(), self.entries.len(), "one var per parameter");
        Bound {
            vars: vars.to_vec(),
            store: self,
        }
    }

    /// Tensors in store order.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    /// Uniform He initialization for a weight with the given fan-in.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data));
    }

    /// Uniform Glorot initialization.
    pub fn init_glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape.to_vec(), value));
    }

    /// Gradients for every parameter (zeros where the loss did not depend on it).
    pub fn collect_grads(&self, bound: &Bound<'_, '_>, grads: &Grads) -> Vec<Tensor> {
        bound.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }
}

/// Tape handles for the tensors of a [`ParamStore`].
pub struct Bound<'t, 's> {
    vars: Vec<Var<'t>>,
    store: &'s ParamStore,
}

impl<'t> Bound<'t, '_> {
    pub fn get(&self, name: &str) -> Var<'t> {
        match self.store.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'t>> {
        self.store.index.get(name).map(|&i| self.vars[i])
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rescales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Sgd {
        lr: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
        /// Multiplies the learning rate every `decay_every` steps.
        #[serde(default = "default_decay")]
        decay: f64,
        #[serde(default = "default_decay_every")]
        decay_every: usize,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_momentum() -> f64 {
    0.9
}
fn default_decay() -> f64 {
    0.5
}
fn default_decay_every() -> usize {
    100
}

impl OptimizerConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr, .. } => lr,
            OptimizerConfig::Sgd {
                lr, decay, decay_every, ..
            } => lr * decay.powi((step / decay_every.max(1)) as i32),
        }
    }
}

/// First- and second-moment state for every parameter.
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.lr_at(self.step)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        let lr = self.cfg.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        for (k, (p, g)) in store.tensors_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            match self.cfg {
                OptimizerConfig::Adam { beta1, beta2, eps, .. } => {
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        *w -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                    }
                }
                OptimizerConfig::Sgd { momentum, .. } => {
                    for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i] = momentum * m[i] + gi;
                        *w -= lr * m[i];
                    }
                }
            }
        }
    }
}

const MAGIC: &[u8; 4] = b"SNCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in f64 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    /// Free-form metadata (ablation, loss weights, step, ...).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, config_hash: &str, meta: serde_json::Value) -> Result<()> {
    let mut offset = 0;
    let tensors = store
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel();
            e
        })
        .collect();
    let header = CheckpointHeader {
        config_hash: config_hash.to_string(),
        meta,
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * offset);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in store.iter() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointHeader)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<(ParamStore, CheckpointHeader)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if buf.len() < 16 || &buf[..4] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize.checked_add(hlen).filter(|&e| e <= buf.len()).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&buf[16..data_start]).map_err(|e| bad(&format!("header: {e}")))?;
    let data = &buf[data_start..];
    if data.len() % 8 != 0 {
        return Err(bad("data section is not a whole number of f64 values"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut store = ParamStore::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset.checked_add(n).filter(|&end| end <= values.len());
        let end = end.ok_or_else(|| bad(&format!("tensor {} exceeds data section", e.name)))?;
        store.insert(e.name.clone(), Tensor::new(e.shape.clone(), values[e.offset..end].to_vec()));
    }
    Ok((store, header))
}
