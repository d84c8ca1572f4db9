use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{AutodiffError, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `(-a, a)` with `a = sqrt(6 / (rows + cols))`.
    Glorot,
    Zeros,
    Constant(f64),
}

/// Seeded, platform-independent random stream (ChaCha8).
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this one's seed.
    pub fn fork(&self, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        RngStream { seed: self.seed, rng }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            false
        } else if p >= 1.0 {
            true
        } else {
            self.uniform() < p
        }
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }
}

/// Named parameters with their Adam moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    values: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init, rng: &mut RngStream) -> Result<ParamId> {
        let n = rows * cols;
        let value = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Glorot => {
                let a = math::sqrt(6.0 / (rows + cols) as f64);
                (0..n).map(|_| (2.0 * rng.uniform() - 1.0) * a).collect()
            }
        };
        self.insert(name, rows, cols, value)
    }

    /// Add a parameter with explicit values (used when loading checkpoints).
    pub fn insert(&mut self, name: &str, rows: usize, cols: usize, value: Vec<f64>) -> Result<ParamId> {
        if self.id(name).is_some() {
            return Err(AutodiffError::DuplicateParameter(name.to_string()));
        }
        if value.len() != rows * cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "insert",
                lhs: (rows, cols),
                rhs: (1, value.len()),
            });
        }
        self.names.push(name.to_string());
        self.shapes.push((rows, cols));
        self.values.push(value);
        self.m.push(vec![0.0; rows * cols]);
        self.v.push(vec![0.0; rows * cols]);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        self.shapes[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.values[id.0]
    }

    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        (&self.m[id.0], &self.v[id.0])
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn parameter_count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    /// Set every parameter value to zero.
    pub fn zero_all(&mut self) {
        for v in &mut self.values {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Gradient buffers aligned with a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub(crate) grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        Gradients {
            grads: store.values.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn reset(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        math::sqrt(self.grads.iter().flatten().map(|x| x * x).sum())
    }

    /// Rescale so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(store: &mut ParameterStore, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
    if grads.grads.len() != store.values.len()
        || grads.grads.iter().zip(&store.values).any(|(g, v)| g.len() != v.len())
    {
        return Err(AutodiffError::MissingGradient);
    }
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, f64::from(t));
    let bc2 = 1.0 - libm::pow(cfg.beta2, f64::from(t));
    for ((value, g), (m, v)) in store
        .values
        .iter_mut()
        .zip(&grads.grads)
        .zip(store.m.iter_mut().zip(store.v.iter_mut()))
    {
        for i in 0..value.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            value[i] -= cfg.lr * mhat / (math::sqrt(vhat) + cfg.eps);
        }
    }
    Ok(())
}
