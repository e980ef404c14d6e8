use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Real, Result, Tensor, TensorError};

/// Index of a parameter inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry<T: Real> {
    name: String,
    tensor: Tensor<T>,
    first_moment: Vec<T>,
    second_moment: Vec<T>,
    step: u64,
}

/// Named parameters plus their Adam state, kept in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new(), index: HashMap::new() }
    }

    /// Registers a parameter. Names are unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::contract("param_set", format!("duplicate parameter `{name}`")));
        }
        let n = tensor.numel();
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            tensor: tensor.with_requires_grad(true),
            first_moment: vec![T::zero(); n],
            second_moment: vec![T::zero(); n],
            step: 0,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].tensor)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Adam step count of one parameter.
    pub fn step(&self, id: ParamId) -> u64 {
        self.entries[id.0].step
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    pub fn grads_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.grad().iter().all(|g| g.is_finite()))
    }

    /// Clamps every gradient component into `[lo, hi]`.
    pub fn clip_gradients(&mut self, lo: f64, hi: f64) -> Result<()> {
        if lo >= hi {
            return Err(TensorError::contract("clip_gradients", format!("empty range [{lo}, {hi}]")));
        }
        let (lo, hi) = (T::of(lo), T::of(hi));
        for e in &mut self.entries {
            e.tensor.grad_mut().iter_mut().for_each(|g| *g = g.max(lo).min(hi));
        }
        Ok(())
    }

    /// One bias-corrected Adam update. Gradients are left in place.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        for e in &mut self.entries {
            e.step += 1;
            let t = e.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
            let grads = e.tensor.grad().to_vec();
            let values = e.tensor.values_mut();
            for (i, g) in grads.into_iter().enumerate() {
                let m = b1 * e.first_moment[i] + (T::one() - b1) * g;
                let v = b2 * e.second_moment[i] + (T::one() - b2) * g * g;
                e.first_moment[i] = m;
                e.second_moment[i] = v;
                let m_hat = m.as_f64() / bc1;
                let v_hat = v.as_f64() / bc2;
                let update = cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                values[i] = T::of(values[i].as_f64() - update);
            }
        }
    }

    /// Copy with converted element type and fresh optimizer state.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for e in &self.entries {
            let mut t = e.tensor.cast::<U>();
            t.zero_grad();
            out.insert(e.name.clone(), t).expect("names are already unique");
        }
        out
    }

    /// Values only, as an independent set with fresh optimizer state.
    pub fn snapshot(&self) -> ParamSet<T> {
        self.cast::<T>()
    }
}
