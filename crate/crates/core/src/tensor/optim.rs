//! Named parameters, Adam, and the cosine learning-rate schedule.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Slot<T> {
    tensor: Tensor<T>,
    m: Vec<T>,
    v: Vec<T>,
}

/// Trainable parameters keyed by path, in insertion order, with Adam moments.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    slots: IndexMap<String, Slot<T>>,
    step: u64,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            slots: IndexMap::new(),
            step: 0,
        }
    }

    /// Registers a parameter; paths must be unique.
    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let path = path.into();
        if self.slots.contains_key(&path) {
            return Err(Error::Invalid(format!("duplicate parameter path `{path}`")));
        }
        let n = tensor.numel();
        self.slots.insert(
            path,
            Slot {
                tensor: tensor.with_requires_grad(true),
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            },
        );
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.slots.get(path).map(|s| &s.tensor)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.slots.get_mut(path).map(|s| &mut s.tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.tensor))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Total element count over all parameters.
    pub fn param_count(&self) -> usize {
        self.slots.values().map(|s| s.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for s in self.slots.values_mut() {
            s.tensor.clear_grad();
        }
    }

    /// Records every parameter as a leaf on `tape`, in store order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self.slots.values().map(|s| tape.leaf(s.tensor.clone())).collect();
        Bound {
            index: self.slots.keys().cloned().enumerate().map(|(i, k)| (k, i)).collect(),
            vars,
        }
    }

    /// Adds the gradients left on `tape` by `backward` into the store.
    pub fn absorb_grads(&mut self, tape: &Tape<T>, bound: &Bound) {
        for (slot, &var) in self.slots.values_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(var) {
                slot.tensor.accumulate_grad(g);
            }
        }
    }
}

/// Parameter leaves recorded on a tape.
pub struct Bound {
    index: IndexMap<String, usize>,
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, path: &str) -> Result<Var> {
        self.index
            .get(path)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{path}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over every parameter in `store`.
///
/// Every parameter must carry a gradient; a missing one is an error naming
/// the parameter and leaves the store untouched.
pub fn adam_step<T: Element>(store: &mut ParamStore<T>, lr: f64, cfg: AdamConfig) -> Result<()> {
    if let Some((path, _)) = store.slots.iter().find(|(_, s)| s.tensor.grad().is_none()) {
        return Err(Error::MissingGrad(path.clone()));
    }
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let step_size = T::lit(lr / bc1);
    let inv_bc2 = T::lit(1.0 / bc2);
    let eps = T::lit(cfg.eps);
    for slot in store.slots.values_mut() {
        let Slot { tensor, m, v } = slot;
        let grad = tensor.grad().expect("checked above").to_vec();
        for (i, (p, g)) in tensor.data_mut().iter_mut().zip(&grad).enumerate() {
            m[i] = b1 * m[i] + one_b1 * *g;
            v[i] = b2 * v[i] + one_b2 * *g * *g;
            let denom = (v[i] * inv_bc2).sqrt() + eps;
            *p = *p - step_size * m[i] / denom;
        }
    }
    Ok(())
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(lr_max: f64, lr_min: f64, total_steps: u64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::config("total_steps", "must be positive"));
        }
        if !(lr_min >= 0.0 && lr_max >= lr_min) {
            return Err(Error::config("lr_max", format!("need lr_max >= lr_min >= 0, got {lr_max} / {lr_min}")));
        }
        Ok(LrSchedule {
            lr_max,
            lr_min,
            total_steps,
        })
    }

    /// The fixed endpoints: 2e-4 decaying to 1e-4.
    pub fn standard(total_steps: u64) -> Result<Self> {
        Self::new(2e-4, 1e-4, total_steps)
    }

    /// Steps outside `[0, total_steps]` clamp to the endpoints.
    pub fn lr_at(&self, step: u64) -> f64 {
        let s = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * s).cos())
    }
}
