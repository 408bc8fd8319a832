use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DenseArray, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParamEntry {
    pub(crate) value: DenseArray,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
    pub(crate) step: u64,
}

/// Named trainable parameters with their AdamW state.
///
/// Names are dotted paths (`encoder.proj_visual.weight`). Iteration order is
/// lexicographic, which fixes the order of every reduction over parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub(crate) entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray) -> Result<(), TensorError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let len = value.len();
        self.entries.insert(
            name,
            ParamEntry {
                value,
                m: vec![0.0; len],
                v: vec![0.0; len],
                step: 0,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseArray> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Copy of the parameters with fresh optimizer state.
    pub fn without_moments(&self) -> Self {
        let mut out = self.clone();
        out.reset_moments();
        out
    }

    pub fn reset_moments(&mut self) {
        for e in self.entries.values_mut() {
            e.m.iter_mut().for_each(|x| *x = 0.0);
            e.v.iter_mut().for_each(|x| *x = 0.0);
            e.step = 0;
        }
    }

    /// Optimizer step counter of one parameter.
    pub fn step_count(&self, name: &str) -> Option<u64> {
        self.entries.get(name).map(|e| e.step)
    }

    /// First and second moment estimates of one parameter.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.entries.get(name).map(|e| (e.m.as_slice(), e.v.as_slice()))
    }

    /// Copies values for every name in `other` whose name starts with `prefix`.
    pub fn copy_values_from(&mut self, other: &ParamStore, prefix: &str) -> Result<(), TensorError> {
        for (name, entry) in other.entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let dst = self
                .entries
                .get_mut(name)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            if dst.value.shape() != entry.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "copy_values_from",
                    lhs: dst.value.shape().to_vec(),
                    rhs: entry.value.shape().to_vec(),
                });
            }
            dst.value = entry.value.clone();
        }
        Ok(())
    }
}

/// Gradient arrays keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients(BTreeMap<String, DenseArray>);

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self(
            store
                .entries
                .iter()
                .map(|(k, e)| (k.clone(), DenseArray::zeros(e.value.shape())))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseArray> {
        self.0.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray) {
        self.0.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `self += other`, elementwise over matching names.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<(), TensorError> {
        for (name, g) in &other.0 {
            let dst = self
                .0
                .get_mut(name)
                .ok_or_else(|| TensorError::MissingGradient(name.clone()))?;
            for (d, s) in dst.data_mut().iter_mut().zip(g.data()) {
                *d += s;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.0.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// AdamW settings and the linear warmup / linear decay schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-3,
            warmup_steps: 100,
            total_steps: 1000,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |detail: &str| {
            Err(TensorError::Domain {
                op: "optim_config",
                detail: detail.to_string(),
            })
        };
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps exceeds total_steps");
        }
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate and weight decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("betas must lie in [0, 1) and epsilon must be positive");
        }
        Ok(())
    }

    /// Learning rate at a 1-based step: ramps linearly to `base_lr` at
    /// `warmup_steps`, then falls linearly to zero at `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step <= self.warmup_steps {
            if self.warmup_steps == 0 {
                return self.base_lr;
            }
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        self.base_lr * (self.total_steps - step) as f64 / span
    }
}

/// One decoupled-weight-decay Adam update of every parameter in `store`.
///
/// `step` is the 1-based global step that drives the schedule; bias
/// correction uses each parameter's own update counter.
pub fn adamw_step(store: &mut ParamStore, grads: &Gradients, cfg: &OptimConfig, step: u64) -> Result<(), TensorError> {
    if step == 0 {
        return Err(TensorError::Domain {
            op: "adamw_step",
            detail: "steps are 1-based".into(),
        });
    }
    for name in store.entries.keys() {
        if grads.get(name).is_none() {
            return Err(TensorError::MissingGradient(name.clone()));
        }
    }
    let lr = cfg.lr_at(step);
    for (name, entry) in store.entries.iter_mut() {
        let g = grads.get(name).expect("checked above");
        if g.shape() != entry.value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                lhs: entry.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        entry.step += 1;
        let t = entry.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let values = entry.value.data_mut();
        for i in 0..values.len() {
            let gi = g.data()[i];
            entry.m[i] = cfg.beta1 * entry.m[i] + (1.0 - cfg.beta1) * gi;
            entry.v[i] = cfg.beta2 * entry.v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = entry.m[i] / bc1;
            let v_hat = entry.v[i] / bc2;
            values[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.epsilon) + cfg.weight_decay * values[i]);
        }
    }
    Ok(())
}

/// `alpha * a + (1 - alpha) * b` for every parameter; optimizer state is
/// reset in the result.
pub fn interpolate_params(a: &ParamStore, b: &ParamStore, alpha: f64) -> Result<ParamStore, TensorError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TensorError::Domain {
            op: "interpolate_params",
            detail: format!("alpha {alpha} outside [0, 1]"),
        });
    }
    if a.entries.len() != b.entries.len() {
        return Err(TensorError::Domain {
            op: "interpolate_params",
            detail: "parameter name sets differ".into(),
        });
    }
    let mut out = ParamStore::new();
    for (name, ea) in &a.entries {
        let eb = b.entries.get(name).ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
        if ea.value.shape() != eb.value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "interpolate_params",
                lhs: ea.value.shape().to_vec(),
                rhs: eb.value.shape().to_vec(),
            });
        }
        let data = ea
            .value
            .data()
            .iter()
            .zip(eb.value.data())
            .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
            .collect();
        out.insert(name.clone(), DenseArray::new(ea.value.shape().to_vec(), data)?)?;
    }
    Ok(out)
}
