use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{DiffError, Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over every parameter in `store`, then
/// clears `grads`. Parameters without a gradient buffer see a zero gradient.
pub fn adam_step(store: &mut ParamStore, grads: &mut Gradients, state: &mut AdamState) -> Result<(), DiffError> {
    if state.m.len() != store.len() || store.iter().zip(&state.m).any(|((_, p), m)| p.value.len() != m.len()) {
        return Err(DiffError::UninitializedOptimizer);
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as f64;
    let bc1 = 1.0 - libm::pow(beta1, t);
    let bc2 = 1.0 - libm::pow(beta2, t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let g = grads.get(id);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let values = store.value_mut(id).data_mut();
        for k in 0..values.len() {
            let gk = g.map_or(0.0, |g| g[k]);
            m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
            v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            values[k] -= lr * m_hat / (libm::sqrt(v_hat) + epsilon);
        }
    }
    grads.zero();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{ParamStore, Tensor};

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(x)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = scalar_store(0.7);
        let mut state = AdamState::new(&store, AdamConfig::default());
        let mut grads = Gradients::for_store(&store);
        let id = store.id("x").unwrap();
        grads.accumulate(id, &[0.0]);
        adam_step(&mut store, &mut grads, &mut state).unwrap();
        assert_eq!(store.value(id).data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = scalar_store(1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(&store, cfg);
        let mut grads = Gradients::for_store(&store);
        let id = store.id("x").unwrap();
        grads.accumulate(id, &[1.0]);
        adam_step(&mut store, &mut grads, &mut state).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction: update = 0.1 / (1 + 1e-8)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((store.value(id).data()[0] - expected).abs() < 1e-15);
        assert!(grads.get(id).is_none());
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let mut a = scalar_store(0.3);
        let mut b = scalar_store(0.3);
        let mut sa = AdamState::new(&a, AdamConfig::default());
        let mut sb = AdamState::new(&b, AdamConfig::default());
        for g in [0.5, -1.25, 3.0] {
            let mut ga = Gradients::for_store(&a);
            let mut gb = Gradients::for_store(&b);
            ga.accumulate(a.id("x").unwrap(), &[g]);
            gb.accumulate(b.id("x").unwrap(), &[g]);
            adam_step(&mut a, &mut ga, &mut sa).unwrap();
            adam_step(&mut b, &mut gb, &mut sb).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut store = scalar_store(1.0);
        let mut state = AdamState::new(&ParamStore::new(), AdamConfig::default());
        let mut grads = Gradients::for_store(&store);
        assert_eq!(
            adam_step(&mut store, &mut grads, &mut state),
            Err(DiffError::UninitializedOptimizer)
        );
    }
}
