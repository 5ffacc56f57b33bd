use serde::{Deserialize, Serialize};

use super::graph::{Gradients, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers follow the parameter order of
/// the store they were created for.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.len() != store.len() || self.first_moment.len() != store.len() {
            return Err(Error::usage(format!(
                "adam: {} params, {} grads, {} moment slots",
                store.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for ((id, _, p), g) in store.iter().zip(grads.iter()) {
            if p.shape() != g.shape() || self.first_moment[id.index()].shape() != p.shape() {
                return Err(Error::usage(format!(
                    "adam: shape mismatch for {}: param {:?}, grad {:?}",
                    store.name(id),
                    p.shape(),
                    g.shape()
                )));
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);

        let ids: Vec<_> = store.ids().collect();
        for (id, g) in ids.into_iter().zip(grads.iter()) {
            let m = self.first_moment[id.index()].data_mut();
            let v = self.second_moment[id.index()].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;

    fn single(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(value)).unwrap();
        s
    }

    fn grads_of(store: &ParamStore, g: f64) -> Gradients {
        // build the gradient through a graph so the type stays opaque
        let mut graph = Graph::new();
        let id = store.ids().next().unwrap();
        let p = graph.param(store, id);
        let loss = graph.scale(p, g);
        graph.backward_for(loss, store).unwrap()
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut store = single(0.7);
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        for _ in 0..5 {
            let g = grads_of(&store, 0.0);
            adam.step(&mut store, &g).unwrap();
        }
        assert_eq!(store.get(store.id("p").unwrap()).item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let mut store = single(0.0);
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        let g = grads_of(&store, 1.0);
        adam.step(&mut store, &g).unwrap();
        let expected = -1e-3 * 1.0 / (1.0 + 1e-8);
        let got = store.get(store.id("p").unwrap()).item();
        assert!((got - expected).abs() < 1e-15, "{got}");
    }

    #[test]
    fn descends_on_a_parabola() {
        let mut store = single(1.0);
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        let mut trace = vec![1.0];
        for _ in 0..100 {
            let p = store.get(store.id("p").unwrap()).item();
            let g = grads_of(&store, 2.0 * p);
            adam.step(&mut store, &g).unwrap();
            trace.push(store.get(store.id("p").unwrap()).item().abs());
        }
        assert!(trace.windows(2).all(|w| w[1] < w[0]));
        // roughly lr per step while the gradient sign is stable
        assert!((*trace.last().unwrap() - 0.9).abs() < 0.01, "{:?}", trace.last());
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut store = single(0.0);
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        let other = {
            let mut s = ParamStore::new();
            s.add("a", Tensor::zeros(&[2, 2])).unwrap();
            s
        };
        let g = Gradients::zeros_like(&other);
        assert!(matches!(adam.step(&mut store, &g), Err(Error::Usage(_))));
    }
}
