//! Named parameter store and the AdamW optimizer (decoupled weight decay).

use std::collections::BTreeMap;

use super::{c, Grads, Real, Tensor};
use crate::{Error, Result};

/// Trainable parameters addressed by name. Iteration order is the name
/// order, which keeps every consumer (optimizer, checkpoints) deterministic.
pub struct Params<F: Real> {
    map: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> Default for Params<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Params<F> {
    pub fn new() -> Self {
        Params { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<F>) {
        assert!(t.needs_grad(), "parameter {name} must require gradients");
        let prev = self.map.insert(name.to_string(), t);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    /// Panics on unknown names: parameter wiring is static per architecture.
    pub fn get(&self, name: &str) -> Tensor<F> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor<F>) {
        let cur = self.map.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(cur.shape(), t.shape(), "parameter {name} shape change");
        *cur = t;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn num_tensors(&self) -> usize {
        self.map.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW with decoupled weight decay:
/// p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p, with bias-corrected moments.
pub struct AdamW<F: Real> {
    cfg: AdamWConfig,
    moments: BTreeMap<String, (Vec<F>, Vec<F>)>,
    steps: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, moments: BTreeMap::new(), steps: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// One update over all parameters. Parameters without a gradient entry
    /// receive zero gradient (weight decay still applies).
    pub fn step(&mut self, params: &mut Params<F>, grads: &Grads<F>, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps;
        let b1 = c::<F>(self.cfg.beta1);
        let b2 = c::<F>(self.cfg.beta2);
        let eps = c::<F>(self.cfg.eps);
        let corr1 = c::<F>(1.0 - self.cfg.beta1.powi(t as i32));
        let corr2 = c::<F>(1.0 - self.cfg.beta2.powi(t as i32));
        let lrv = c::<F>(lr);
        let wd = c::<F>(self.cfg.weight_decay);

        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let p = params.get(&name);
            let zero;
            let g: &[F] = match grads.get(&p) {
                Some(g) => g,
                None => {
                    zero = vec![F::zero(); p.len()];
                    &zero
                }
            };
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter {name} at element {bad} (optimizer step {t})"
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![F::zero(); p.len()], vec![F::zero(); p.len()]));
            let mut new_data = p.data().to_vec();
            for i in 0..new_data.len() {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                let mhat = m[i] / corr1;
                let vhat = v[i] / corr2;
                new_data[i] = new_data[i] - lrv * mhat / (vhat.sqrt() + eps) - lrv * wd * new_data[i];
            }
            params.set(&name, Tensor::param(p.shape(), new_data));
        }
        Ok(())
    }
}
