use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Matrix, Var};
use super::params::{Bound, ParamStore};
use crate::error::{Error, Result};

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
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Adam moment estimates for one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || -> Vec<Matrix> {
            store
                .tensors()
                .iter()
                .map(|t| Array2::zeros(t.raw_dim()))
                .collect()
        };
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update. `grads` must follow store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix]) -> Result<()> {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        for (i, g) in grads.iter().enumerate() {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    op: "adam",
                    context: format!("gradient of parameter {i}"),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= learning_rate * mhat / (vhat.sqrt() + epsilon);
                });
        }
        Ok(())
    }
}

/// Backpropagates `loss` and applies one optimizer step to the parameters
/// bound as `bound`. Returns the loss value.
pub fn backward_and_step(
    graph: &Graph,
    loss: Var,
    bound: &Bound,
    store: &mut ParamStore,
    opt: &mut Adam,
) -> Result<f64> {
    let grads = graph.backward(loss)?;
    let per_param = bound.gradients(graph, &grads);
    opt.step(store, &per_param)?;
    Ok(graph.scalar(loss))
}
