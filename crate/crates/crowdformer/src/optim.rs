//! Named parameter store and the Adam optimizer with decoupled weight decay.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// One trainable tensor plus its optimizer moment buffers.
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub m: Tensor,
    pub v: Tensor,
}

/// All model parameters, keyed by unique dotted names. Iteration order is the
/// name order, which fixes checkpoint layout and update order.
#[derive(Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) {
        assert!(
            !self.params.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        assert!(
            !name.starts_with("opt."),
            "parameter name `{name}` uses the reserved optimizer prefix"
        );
        let (m, v) = (Tensor::zeros(value.shape()), Tensor::zeros(value.shape()));
        self.params.insert(name.to_string(), Param { value, grad: None, m, v });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Creates one differentiable leaf per parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone(), true)))
            .collect();
        Binding { vars }
    }

    /// Adds `scale` times the tape gradients from one sample's backward pass
    /// into the stored grads. Parameters not reached by the loss get zeros.
    pub fn accumulate_grads(&mut self, tape: &Tape, binding: &Binding, scale: f64) {
        for (name, p) in self.params.iter_mut() {
            let var = binding.get(name);
            let acc = p
                .grad
                .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            if let Some(g) = tape.grad(var) {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }
}

#[derive(Clone)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    /// Swaps the variable backing one parameter (used by gradient checks to
    /// substitute a perturbed leaf).
    pub fn insert(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with decoupled weight decay. Moment buffers live in the
/// [`ParamStore`] so they serialize with the checkpoint.
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Adam {
        Adam { cfg, step: 0 }
    }

    /// One update over every registered parameter; grads are consumed.
    ///
    /// Panics if any parameter has no accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            let grad = p
                .grad
                .take()
                .unwrap_or_else(|| panic!("adam step with no gradient for `{name}`"));
            for i in 0..grad.numel() {
                let g = grad.data()[i];
                let m = &mut p.m.data_mut()[i];
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                let v = &mut p.v.data_mut()[i];
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                let w = &mut p.value.data_mut()[i];
                *w -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
    }
}
