//! Adam with bias correction over a named parameter store.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::real::Real;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        // Paper gives only the learning rate; beta defaults are ours.
        AdamConfig { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first/second moment state plus the step counter.
pub struct Adam<T: Real> {
    pub cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the supplied gradients. Consuming the gradient
    /// map is the "grads then zeroed" contract: the next step starts
    /// from scratch.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: BTreeMap<String, Vec<T>>) {
        assert!(!grads.is_empty(), "adam step without populated gradients");
        self.step += 1;
        let t = self.step as f64;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let lr = T::from_f64(self.cfg.lr);
        let b1t = T::from_f64(b1);
        let b2t = T::from_f64(b2);
        let one_m_b1 = T::from_f64(1.0 - b1);
        let one_m_b2 = T::from_f64(1.0 - b2);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(self.cfg.eps);
        for (name, g) in grads {
            assert!(
                !params.is_frozen(&name),
                "adam step received a gradient for frozen parameter {name}"
            );
            let value = params.get_mut(&name);
            assert_eq!(
                g.len(),
                value.numel(),
                "gradient length mismatch for {name}: {} vs {}",
                g.len(),
                value.numel()
            );
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::ZERO; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::ZERO; g.len()]);
            assert_eq!(m.len(), g.len(), "moment shape mismatch for {name}");
            for i in 0..g.len() {
                m[i] = b1t * m[i] + one_m_b1 * g[i];
                v[i] = b2t * v[i] + one_m_b2 * g[i] * g[i];
                let m_hat = m[i] * inv_bc1;
                let v_hat = v[i] * inv_bc2;
                value.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::array::Array;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", Array::from_vec(vec![3], vec![1.0, -2.0, 0.5]));
        let before = store.get("w").clone();
        let mut adam = Adam::new(AdamConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0; 3]);
        adam.step(&mut store, grads);
        assert_eq!(store.get("w"), &before);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", Array::from_vec(vec![2], vec![0.0, 0.0]));
        let mut adam = Adam::new(AdamConfig { lr: 0.01, ..AdamConfig::default() });
        for _ in 0..50 {
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), vec![1.0, -3.0]);
            adam.step(&mut store, grads);
        }
        let w = store.get("w");
        assert!(w.data[0] < -0.1, "positive grad must decrease param, got {}", w.data[0]);
        assert!(w.data[1] > 0.1, "negative grad must increase param, got {}", w.data[1]);
    }

    #[test]
    fn single_step_matches_hand_formula() {
        // One Adam step on a scalar with g = 0.3, lr = 1e-3.
        let g = 0.3f64;
        let cfg = AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let m = (1.0 - cfg.beta1) * g;
        let v = (1.0 - cfg.beta2) * g * g;
        let m_hat = m / (1.0 - cfg.beta1);
        let v_hat = v / (1.0 - cfg.beta2);
        let expected = 1.0 - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);

        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", Array::from_vec(vec![1], vec![1.0]));
        let mut adam = Adam::new(cfg);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![g]);
        adam.step(&mut store, grads);
        assert!(
            (store.get("w").data[0] - expected).abs() < 1e-7,
            "adam step {} vs hand-computed {}",
            store.get("w").data[0],
            expected
        );
    }

    #[test]
    #[should_panic(expected = "without populated gradients")]
    fn missing_grads_is_a_contract_error() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", Array::from_vec(vec![1], vec![1.0]));
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, BTreeMap::new());
    }
}
