use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

/// Adam hyperparameters. Defaults are β1 = 0.9, β2 = 0.999, lr = 1e-4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// One bias-corrected Adam update of every parameter in `params`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= learning_rate * mhat / (vhat.sqrt() + epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[test]
    fn moments_match_parameter_shapes() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[3, 4]));
        store.add("b", Tensor::zeros(&[1, 4]));
        let adam = AdamState::new(AdamConfig::default(), &store);
        for ((_, p), (m, v)) in store.iter().zip(adam.first_moments().iter().zip(adam.second_moments())) {
            assert_eq!(p.shape(), m.shape());
            assert_eq!(p.shape(), v.shape());
        }
    }

    #[test]
    fn convex_quadratic_decreases_monotonically() {
        // f(w) = Σ c_i (w_i - t_i)^2 with the default constants.
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row_vector(vec![1.0, -2.0, 0.5, 3.0]));
        let target = Tensor::row_vector(vec![0.2, 0.1, -0.3, 2.0]);
        let coef = Tensor::row_vector(vec![1.0, 4.0, 0.5, 2.0]);
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape, true);
            let t = tape.constant(target.clone());
            let c = tape.constant(coef.clone());
            let d = tape.sub(b[id], t).unwrap();
            let sq = tape.square(d);
            let w = tape.mul(sq, c).unwrap();
            let loss = tape.sum(w);
            let value = tape.value(loss).item();
            assert!(value < prev, "loss increased: {value} >= {prev}");
            prev = value;
            let grads = tape.backward(loss).unwrap();
            let g = store.collect_grads(&grads, &b);
            adam.step(&mut store, &g);
        }
    }
}
