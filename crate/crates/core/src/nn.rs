//! Named parameter storage, tape binding and first-order optimizers.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

pub fn standard_normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Ordered name -> tensor map. Iteration order (and therefore update order
/// and checkpoint layout) is lexicographic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::data(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| Error::data(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Place every parameter on `tape`; `trainable` decides which leaves
    /// require gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self.params.iter().map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable(name)))).collect();
        Bound { vars }
    }
}

/// Parameters placed on a particular tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` was not bound"),
        }
    }

    /// Replace the binding of one parameter (used to differentiate with
    /// respect to a single tensor).
    pub fn set(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    /// Gradients of every bound leaf that required them, in name order.
    pub fn gradients(&self, tape: &Tape) -> Vec<(String, Vec<f64>)> {
        self.vars
            .iter()
            .filter(|(_, v)| tape.requires_grad(**v))
            .map(|(name, v)| {
                let g = tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(*v).numel()]);
                (name.clone(), g)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Plain gradient descent or Adam (no weight decay). Fully deterministic.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: HashMap<String, Vec<f64>>,
    second: HashMap<String, Vec<f64>>,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer { kind, lr, step: 0, first: HashMap::new(), second: HashMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Vec<f64>)]) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        for (name, g) in grads {
            let p = store.get_mut(name)?.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gv) in p.iter_mut().zip(g) {
                        *w -= self.lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let c1 = 1.0 - Self::BETA1.powf(t);
                    let c2 = 1.0 - Self::BETA2.powf(t);
                    for i in 0..g.len() {
                        m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                        v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                        p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// `x @ W + b` for `x[..., in]` with parameters `{prefix}.w` and `{prefix}.b`.
pub fn linear(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.matmul(x, p.get(&format!("{prefix}.w")))?;
    Ok(tape.add(h, p.get(&format!("{prefix}.b")))?)
}

pub fn init_linear(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.w"), normal_tensor(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt()));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(&[3.0, -2.0]));
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape, |_| true);
            let sq = tape.square(b.get("x"));
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap();
            opt.step(&mut store, &b.gradients(&tape)).unwrap();
        }
        assert!(store.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_leaves_report_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.0));
        store.insert("b", Tensor::scalar(2.0));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |n| n == "a");
        let y = tape.mul(bound.get("a"), bound.get("b")).unwrap();
        tape.backward(y).unwrap();
        let grads = bound.gradients(&tape);
        assert_eq!(grads, vec![("a".to_string(), vec![2.0])]);
    }
}
