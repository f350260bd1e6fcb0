//! Parameter storage and the AdamW update rule. Moment buffers and all
//! update arithmetic are f64 regardless of the working precision, so f32
//! training keeps well-conditioned optimizer state. Iteration order is the
//! BTreeMap name order, which makes updates bitwise reproducible.

use std::collections::BTreeMap;

use crate::real::{c, Real};
use crate::tensor::Tensor;

pub struct Slot<T: Real> {
    pub value: Tensor<T>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

pub struct ParamStore<T: Real> {
    slots: BTreeMap<String, Slot<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { slots: BTreeMap::new() }
    }

    /// Registers a parameter; duplicate names are a programming error.
    pub fn insert(&mut self, name: &str, value: Tensor<T>) {
        let numel = value.numel();
        let prev = self.slots.insert(
            name.to_string(),
            Slot {
                value,
                m: vec![0.0; numel],
                v: vec![0.0; numel],
            },
        );
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.slots.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<T>) {
        let slot = self.slots.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(slot.value.shape(), value.shape(), "parameter shape changed: {name}");
        slot.value = value;
    }

    /// Replaces a slot wholesale (checkpoint restore).
    pub fn restore(&mut self, name: &str, value: Tensor<T>, m: Vec<f64>, v: Vec<f64>) {
        assert_eq!(value.numel(), m.len());
        assert_eq!(value.numel(), v.len());
        self.slots.insert(name.to_string(), Slot { value, m, v });
    }

    pub fn slot(&self, name: &str) -> &Slot<T> {
        self.slots.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Slot<T>)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), s))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total element count across parameters with the given name prefix.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.slots
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, s)| s.value.numel())
            .sum()
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
        }
    }

    /// One update over every parameter present in `grads`; parameters without
    /// a gradient entry are left untouched (frozen networks, unused biases).
    /// Weight decay is decoupled: value -= lr * wd * value, applied alongside
    /// the moment update, never folded into the gradient.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Vec<T>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let slot = store
                .slots
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            assert_eq!(g.len(), slot.value.numel(), "gradient size mismatch for {name}");
            let data = slot.value.data_mut();
            for i in 0..g.len() {
                let gi = g[i].to_f64();
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * gi;
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                let x = data[i].to_f64();
                let step = self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * x);
                data[i] = c(x - step);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction, the first AdamW step (wd = 0) moves each
        // coordinate by exactly lr * sign(g) up to the eps term.
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let mut opt = AdamW::new(0.1, 0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.5, -0.25]);
        opt.step(&mut store, &grads);
        let w = store.get("w").data();
        assert!((w[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((w[1] - (-1.0 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn decay_shrinks_without_gradient_signal() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_vec(&[1], vec![2.0]));
        let mut opt = AdamW::new(0.01, 0.5);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0]);
        opt.step(&mut store, &grads);
        // Gradient is zero so the Adam term vanishes; only decay acts.
        let w = store.get("w").data()[0];
        assert!((w - (2.0 - 0.01 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameters_stay_put() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::from_vec(&[1], vec![1.0]));
        store.insert("b", Tensor::from_vec(&[1], vec![5.0]));
        let mut opt = AdamW::new(0.1, 0.1);
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), vec![1.0]);
        opt.step(&mut store, &grads);
        assert_eq!(store.get("b").data()[0], 5.0);
        assert_ne!(store.get("a").data()[0], 1.0);
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let mut store = ParamStore::<f32>::new();
            store.insert("w", Tensor::from_vec(&[3], vec![0.5f32, -0.5, 0.25]));
            let mut opt = AdamW::new(0.01, 0.001);
            for step in 0..10 {
                let mut grads = BTreeMap::new();
                grads.insert("w".to_string(), vec![0.1f32 * step as f32, -0.2, 0.3]);
                opt.step(&mut store, &grads);
            }
            store.get("w").data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
