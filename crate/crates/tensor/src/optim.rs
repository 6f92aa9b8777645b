use std::collections::{BTreeMap, HashMap};

use crate::{Array, Element, ParamStore};

/// Hyper-parameters of [`Adam`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-3, beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

/// Adaptive moment estimation with bias correction.
///
/// Moments are keyed by parameter name so the full optimizer state can be
/// checkpointed next to the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Array<T>>,
    second: BTreeMap<String, Array<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient entry are left alone.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &HashMap<String, Array<T>>) {
        self.step += 1;
        let c = self.config;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        let mut names: Vec<&String> = grads.keys().collect();
        names.sort();
        for name in names {
            let g = &grads[name];
            let Some(p) = params.get_mut(name) else { continue };
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for `{name}`");
            let m = self.first.entry(name.clone()).or_insert_with(|| Array::zeros(g.shape()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Array::zeros(g.shape()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *pi = *pi - lr * update;
            }
        }
    }

    /// Flattens the state into named tensors (`m.<name>`, `v.<name>`).
    pub fn export(&self) -> (u64, Vec<(String, Array<T>)>) {
        let mut out = Vec::new();
        for (k, a) in &self.first {
            out.push((format!("m.{k}"), a.clone()));
        }
        for (k, a) in &self.second {
            out.push((format!("v.{k}"), a.clone()));
        }
        (self.step, out)
    }

    /// Inverse of [`Adam::export`]; entries not prefixed `m.`/`v.` are rejected.
    pub fn import(
        config: AdamConfig,
        step: u64,
        tensors: impl IntoIterator<Item = (String, Array<T>)>,
    ) -> Result<Self, String> {
        let mut adam = Self::new(config);
        adam.step = step;
        for (name, a) in tensors {
            if let Some(k) = name.strip_prefix("m.") {
                adam.first.insert(k.to_string(), a);
            } else if let Some(k) = name.strip_prefix("v.") {
                adam.second.insert(k.to_string(), a);
            } else {
                return Err(format!("unexpected optimizer tensor `{name}`"));
            }
        }
        Ok(adam)
    }
}
