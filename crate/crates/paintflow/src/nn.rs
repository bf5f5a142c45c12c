//! Parameter storage, initialization, the Adam optimizer and the fixed
//! (non-learned) embeddings shared by the backbone and the codec.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::normal_f32;
use crate::tensor::Tensor;

/// Named parameter tensors in insertion order. Order is the contract for
/// optimizer state and checkpoint layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.entries.push((name.clone(), tensor));
        let id = self.entries.len() - 1;
        self.index.insert(name, id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn at(&self, id: usize) -> (&str, &Tensor) {
        let (name, t) = &self.entries[id];
        (name, t)
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }
}

/// Normal(0, std) initialization.
pub fn init_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = normal_f32(rng) * std;
    }
    t
}

/// LeCun-style fan-in scaled init for linear weights of shape (fan_in, fan_out).
pub fn init_linear(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    init_normal(rng, &[fan_in, fan_out], 1.0 / (fan_in as f32).sqrt())
}

/// Fixed sinusoidal position encoding table, shape (positions, dim).
pub fn sinusoidal_positions(positions: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[positions, dim]);
    let half = dim / 2;
    for p in 0..positions {
        for i in 0..half {
            let freq = 1.0f64 / 10000f64.powf(i as f64 / half.max(1) as f64);
            let angle = p as f64 * freq;
            t.data_mut()[p * dim + 2 * i] = angle.sin() as f32;
            t.data_mut()[p * dim + 2 * i + 1] = angle.cos() as f32;
        }
    }
    t
}

/// Sinusoidal features of a scalar time in [0, 1], shape (dim,). Frequencies
/// span 1..1000 geometrically so nearby times stay distinguishable.
pub fn time_features(t: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = 1000f64.powf(i as f64 / (half.max(2) - 1) as f64);
        let angle = t as f64 * freq;
        out[2 * i] = angle.sin() as f32;
        out[2 * i + 1] = angle.cos() as f32;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam first/second moment buffers, aligned with a ParamStore's entries.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> AdamState {
        AdamState {
            step: 0,
            m: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }
}

/// One Adam update over every parameter. `grads[i]` must align with entry i
/// (empty slice means zero gradient).
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Vec<f32>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} gradient buffers", params.len()),
            actual: format!("{}", grads.len()),
        });
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - (cfg.beta1 as f64).powf(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powf(t);

    for (i, (_, tensor)) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.is_empty() {
            continue;
        }
        debug_assert_eq!(g.len(), tensor.len());
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let data = tensor.data_mut();
        for j in 0..data.len() {
            let grad = g[j] + cfg.weight_decay * data[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * grad;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * grad * grad;
            let m_hat = m[j] as f64 / bc1;
            let v_hat = v[j] as f64 / bc2;
            data[j] -= (cfg.learning_rate as f64 * m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32;
        }
    }
    Ok(())
}

/// Global L2 norm across all gradient buffers.
pub fn global_grad_norm(grads: &[Vec<f32>]) -> f32 {
    let mut acc = 0.0f64;
    for g in grads {
        for &v in g {
            acc += (v as f64) * (v as f64);
        }
    }
    acc.sqrt() as f32
}

/// Scale every gradient so the global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    let norm = global_grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
