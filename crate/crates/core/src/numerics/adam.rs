use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay: 0.95,
        }
    }
}

/// Adam with bias correction and exponential per-epoch learning-rate decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
    epoch: u32,
    layout: Vec<(String, Vec<usize>)>,
}

fn layout_of(store: &ParamStore) -> Vec<(String, Vec<usize>)> {
    store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value().shape().to_vec()))
        .collect()
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value().shape())).collect();
        Adam {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
            epoch: 0,
            layout: layout_of(store),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Sets the epoch used for the decayed learning rate.
    pub fn set_epoch(&mut self, epoch: u32) {
        self.epoch = epoch;
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate * self.config.decay.powi(self.epoch as i32)
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.layout.len()
            || store
                .iter()
                .zip(&self.layout)
                .any(|((_, p), (name, shape))| &p.name != name || p.value().shape() != &shape[..])
        {
            return Err(Error::Optimizer(
                "parameter set changed since the optimizer state was created".into(),
            ));
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
            ..
        } = self.config;
        let lr = self.learning_rate();
        let correction1 = 1.0 - beta1.powf(self.step as f64);
        let correction2 = 1.0 - beta2.powf(self.step as f64);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let param = store.get_mut(id);
            if !param.trainable {
                continue;
            }
            let grad = param.grad.data().to_vec();
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            let value = param.value_mut().data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let before = store.value(store.id("w").unwrap()).clone();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        for _ in 0..5 {
            adam.step(&mut store).unwrap();
        }
        assert_eq!(store.value(store.id("w").unwrap()), &before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(0.0));
        store.get_mut(id).grad = Tensor::scalar(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store).unwrap();
        // m_hat = 1, v_hat = 1, so the step is -lr / (1 + eps).
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((store.value(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_parameters_stay_identical() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(0.3));
        let b = store.add("b", Tensor::scalar(0.3));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        for k in 0..50 {
            let g = ((k as f64) * 0.7).sin();
            store.get_mut(a).grad = Tensor::scalar(g);
            store.get_mut(b).grad = Tensor::scalar(g);
            adam.step(&mut store).unwrap();
        }
        assert_eq!(store.value(a), store.value(b));
        assert_eq!(adam.steps(), 50);
    }

    #[test]
    fn changed_parameter_set_is_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::scalar(1.0));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        store.add("b", Tensor::scalar(1.0));
        assert!(matches!(adam.step(&mut store), Err(Error::Optimizer(_))));
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn learning_rate_decays_per_epoch() {
        let store = ParamStore::new();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.set_epoch(2);
        assert!((adam.learning_rate() - 1e-3 * 0.95 * 0.95).abs() < 1e-18);
    }
}
