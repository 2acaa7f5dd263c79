//! Named parameters with per-parameter Adam state.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::NumericError;

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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    value: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a parameter; optimizer state starts at zero.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let n = value.len();
        self.slots.insert(
            name.into(),
            Slot {
                value,
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn step_count(&self, name: &str) -> Option<u64> {
        self.slots.get(name).map(|s| s.step)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k, &s.value))
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// Clears first/second moments and step counters.
    pub fn reset_optimizer(&mut self) {
        for s in self.slots.values_mut() {
            s.m.iter_mut().for_each(|x| *x = 0.0);
            s.v.iter_mut().for_each(|x| *x = 0.0);
            s.step = 0;
        }
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<(), NumericError> {
        for (name, slot) in &self.slots {
            let g = grads
                .get(name)
                .ok_or_else(|| NumericError::MissingGradient(name.clone()))?;
            if g.shape() != slot.value.shape() {
                return Err(NumericError::ShapeMismatch {
                    op: "adam_step",
                    lhs_name: format!("param `{name}`"),
                    lhs: slot.value.shape().to_vec(),
                    rhs_name: "gradient".into(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        for (name, slot) in self.slots.iter_mut() {
            let g = grads.get(name).expect("checked above").data();
            slot.step += 1;
            let t = slot.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let w = slot.value.data_mut();
            for i in 0..w.len() {
                slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g[i];
                slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                w[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// One gradient tensor per parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn from_map(grads: BTreeMap<String, Tensor>) -> Self {
        Self { grads }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.grads.remove(name)
    }

    /// Adds `other` elementwise, in name order.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(mine) => {
                    for (a, b) in mine.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(value));
        p
    }

    fn grad(value: f64) -> Gradients {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::scalar(value));
        Gradients::from_map(m)
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = single(0.7);
        p.adam_step(&grad(0.0), &AdamConfig::default()).unwrap();
        assert_eq!(p.value("w").unwrap().item(), 0.7);
        assert_eq!(p.step_count("w"), Some(1));
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε).
        let mut p = single(0.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        p.adam_step(&grad(1.0), &cfg).unwrap();
        let moved = p.value("w").unwrap().item();
        assert!((moved + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut p = single(1.0);
        p.insert("other", Tensor::scalar(2.0));
        let err = p.adam_step(&grad(1.0), &AdamConfig::default()).unwrap_err();
        assert_eq!(err, NumericError::MissingGradient("other".into()));
        // nothing was updated
        assert_eq!(p.value("w").unwrap().item(), 1.0);
    }

    #[test]
    fn runs_are_bit_identical() {
        let run = || {
            let mut p = single(0.3);
            for k in 0..100 {
                let g = ((k as f64) * 0.37).sin();
                p.adam_step(&grad(g), &AdamConfig::default()).unwrap();
            }
            p.value("w").unwrap().item().to_bits()
        };
        assert_eq!(run(), run());
    }
}
