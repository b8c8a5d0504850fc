use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Fixed-step stochastic gradient descent.
    Sgd,
    /// Adam with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    Adam,
}

/// Optimizer state for one parameter vector.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        learning_rate: f64,
    },
    Adam {
        learning_rate: f64,
        first: Vec<f64>,
        second: Vec<f64>,
        steps: i32,
    },
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { learning_rate },
            OptimizerKind::Adam => Optimizer::Adam {
                learning_rate,
                first: vec![0.0; params],
                second: vec![0.0; params],
                steps: 0,
            },
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        match self {
            Optimizer::Sgd { learning_rate } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= *learning_rate * g;
                }
            }
            Optimizer::Adam {
                learning_rate,
                first,
                second,
                steps,
            } => {
                *steps = steps.saturating_add(1);
                let c1 = 1.0 - BETA1.powi(*steps);
                let c2 = 1.0 - BETA2.powi(*steps);
                for (((p, &g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(first.iter_mut())
                    .zip(second.iter_mut())
                {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    *p -= *learning_rate * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
                }
            }
        }
    }
}

/// Rescales `grads` in place so their L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
}
