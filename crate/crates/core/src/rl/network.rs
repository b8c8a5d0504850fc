//! Fully connected Q-network with hand-written backpropagation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::sim::Action;

use super::Transition;

/// ReLU multilayer perceptron mapping an observation to one value per
/// action. Parameters live in one flat vector: for each layer, the weight
/// matrix (row-major, `out × in`) followed by the bias vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetwork {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Per-layer activations kept for the backward pass.
#[derive(Debug, Default)]
pub(crate) struct Activations {
    /// `layers[0]` is the input; `layers[k]` the output of layer `k`.
    layers: Vec<Vec<f64>>,
}

impl QNetwork {
    /// All-zero network with the given input width and hidden layers.
    pub fn zeros(input: usize, hidden: &[usize]) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(Action::COUNT);
        let count = param_count(&sizes);
        Self {
            sizes,
            params: vec![0.0; count],
        }
    }

    /// Uniform `±1/√fan_in` initialization of weights and biases.
    pub fn new(input: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut net = Self::zeros(input, hidden);
        let mut offset = 0;
        for w in net.sizes.clone().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut net.params[offset..offset + fan_out * (fan_in + 1)] {
                *p = rng.random_range(-bound..bound);
            }
            offset += fan_out * (fan_in + 1);
        }
        net
    }

    pub fn from_params(sizes: Vec<usize>, params: Vec<f64>) -> Option<Self> {
        let valid = sizes.len() >= 2
            && sizes.iter().all(|&s| s > 0)
            && sizes.last() == Some(&Action::COUNT)
            && params.len() == param_count(&sizes);
        valid.then_some(Self { sizes, params })
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    /// Layer widths from input to output.
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Index of `(layer, out, in)` in the flat weight vector; `in ==
    /// fan_in` addresses the bias.
    pub fn param_index(&self, layer: usize, out: usize, input: usize) -> usize {
        let offset: usize = self.sizes.windows(2).take(layer).map(|w| w[1] * (w[0] + 1)).sum();
        let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
        if input == fan_in {
            offset + fan_out * fan_in + out
        } else {
            offset + out * fan_in + input
        }
    }

    pub fn forward(&self, input: &[f64]) -> [f64; Action::COUNT] {
        let mut acts = Activations::default();
        self.forward_cached(input, &mut acts);
        let mut out = [0.0; Action::COUNT];
        out.copy_from_slice(acts.layers.last().expect("output layer"));
        out
    }

    pub(crate) fn forward_cached(&self, input: &[f64], acts: &mut Activations) {
        assert_eq!(
            input.len(),
            self.sizes[0],
            "observation width does not match the network input"
        );
        let depth = self.sizes.len() - 1;
        acts.layers.resize_with(self.sizes.len(), Vec::new);
        acts.layers[0].clear();
        acts.layers[0].extend_from_slice(input);
        let mut offset = 0;
        for layer in 0..depth {
            let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
            let weights = &self.params[offset..offset + fan_out * fan_in];
            let biases = &self.params[offset + fan_out * fan_in..offset + fan_out * (fan_in + 1)];
            let (before, after) = acts.layers.split_at_mut(layer + 1);
            let x = &before[layer];
            let y = &mut after[0];
            y.clear();
            for (row, &bias) in weights.chunks_exact(fan_in).zip(biases) {
                let z = bias + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                y.push(if layer + 1 < depth { z.max(0.0) } else { z });
            }
            offset += fan_out * (fan_in + 1);
        }
    }

    /// Accumulates `∂(upstream · q)/∂θ` into `grads`, where `upstream` is the
    /// loss gradient w.r.t. the output layer for the cached forward pass.
    fn backprop(&self, acts: &Activations, upstream: &[f64], grads: &mut [f64], scratch: &mut Vec<f64>) {
        let depth = self.sizes.len() - 1;
        let mut delta = upstream.to_vec();
        let mut offset = self.params.len();
        for layer in (0..depth).rev() {
            let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
            offset -= fan_out * (fan_in + 1);
            let x = &acts.layers[layer];
            let (w_grad, b_grad) = grads[offset..offset + fan_out * (fan_in + 1)].split_at_mut(fan_out * fan_in);
            for ((g_row, g_b), &d) in w_grad.chunks_exact_mut(fan_in).zip(b_grad.iter_mut()).zip(&delta) {
                if d == 0.0 {
                    continue;
                }
                *g_b += d;
                for (g, &v) in g_row.iter_mut().zip(x) {
                    *g += d * v;
                }
            }
            if layer == 0 {
                break;
            }
            let weights = &self.params[offset..offset + fan_out * fan_in];
            scratch.clear();
            scratch.resize(fan_in, 0.0);
            for (row, &d) in weights.chunks_exact(fan_in).zip(&delta) {
                if d == 0.0 {
                    continue;
                }
                for (s, &w) in scratch.iter_mut().zip(row) {
                    *s += d * w;
                }
            }
            // ReLU derivative of the previous layer's output.
            for (s, &a) in scratch.iter_mut().zip(x) {
                if a <= 0.0 {
                    *s = 0.0;
                }
            }
            std::mem::swap(&mut delta, scratch);
        }
    }

    pub fn copy_from(&mut self, other: &QNetwork) {
        debug_assert_eq!(self.sizes, other.sizes);
        self.params.copy_from_slice(&other.params);
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
}

/// Lowest-index argmax of the network output.
pub fn act_greedy(net: &QNetwork, observation: &[f64]) -> Action {
    Action::from_code(argmax(&net.forward(observation))).expect("five outputs")
}

/// First index of the maximum; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Bellman optimality targets: `r` for terminal transitions, otherwise
/// `r + γ · max_a' Q_target(s', a')`.
pub fn td_target(batch: &[&Transition], target_net: &QNetwork, gamma: f64) -> Vec<f64> {
    batch
        .iter()
        .map(|t| {
            if t.done {
                t.reward
            } else {
                let next = target_net.forward(&t.next_observation);
                let best = next.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                t.reward + gamma * best
            }
        })
        .collect()
}

/// Mean squared TD error over the batch and its gradient w.r.t. every
/// parameter of `net`.
pub fn backward(net: &QNetwork, batch: &[&Transition], targets: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(batch.len(), targets.len());
    let mut grads = vec![0.0; net.params.len()];
    let mut acts = Activations::default();
    let mut scratch = Vec::new();
    let n = batch.len() as f64;
    let mut loss = 0.0;
    for (t, &target) in batch.iter().zip(targets) {
        net.forward_cached(&t.observation, &mut acts);
        let q = acts.layers.last().expect("output")[t.action as usize];
        let error = q - target;
        loss += error * error / n;
        let mut upstream = [0.0; Action::COUNT];
        upstream[t.action as usize] = 2.0 * error / n;
        net.backprop(&acts, &upstream, &mut grads, &mut scratch);
    }
    (loss, grads)
}

/// Batch loss only, for finite-difference checks.
pub fn loss(net: &QNetwork, batch: &[&Transition], targets: &[f64]) -> f64 {
    let n = batch.len() as f64;
    batch
        .iter()
        .zip(targets)
        .map(|(t, &target)| {
            let q = net.forward(&t.observation)[t.action as usize];
            (q - target).powi(2) / n
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn transition(observation: Vec<f64>, action: u8, reward: f64, done: bool) -> Transition {
        Transition {
            next_observation: observation.clone(),
            observation,
            action,
            reward,
            done,
        }
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let net = QNetwork::zeros(7, &[4, 3]);
        assert_eq!(net.forward(&[1.0; 7]), [0.0; 5]);
    }

    #[test]
    fn identity_linear_layer_copies_input() {
        let mut net = QNetwork::zeros(5, &[]);
        for i in 0..5 {
            let idx = net.param_index(0, i, i);
            net.params_mut()[idx] = 1.0;
        }
        let input = [0.5, -1.0, 2.0, 0.0, 3.25];
        assert_eq!(net.forward(&input), input);
    }

    #[test]
    fn forward_matches_naive_matrix_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let net = QNetwork::new(6, &[8, 4], &mut rng);
            let input: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            // Oracle: explicit nested loops over (layer, out, in) indices.
            let mut x = input.clone();
            let sizes = net.sizes().to_vec();
            for layer in 0..sizes.len() - 1 {
                let mut y = vec![0.0; sizes[layer + 1]];
                for (o, yo) in y.iter_mut().enumerate() {
                    let mut z = net.params()[net.param_index(layer, o, sizes[layer])];
                    for (i, xi) in x.iter().enumerate() {
                        z += net.params()[net.param_index(layer, o, i)] * xi;
                    }
                    *yo = if layer + 2 < sizes.len() { z.max(0.0) } else { z };
                }
                x = y;
            }
            for (a, b) in net.forward(&input).iter().zip(&x) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn td_target_cases() {
        let mut net = QNetwork::zeros(1, &[]);
        let bias_of_action_2 = net.param_index(0, 2, 1);
        net.params_mut()[bias_of_action_2] = 2.0;
        let live = transition(vec![0.0], 0, 1.0, false);
        let dead = transition(vec![0.0], 0, 1.0, true);
        assert_eq!(td_target(&[&live], &net, 0.0), vec![1.0]);
        assert_eq!(td_target(&[&dead], &net, 0.8), vec![1.0]);
        assert_eq!(td_target(&[&live], &net, 0.8), vec![1.0 + 0.8 * 2.0]);
        assert_eq!(td_target(&[&live], &net, 0.8)[0], 2.6);
    }

    #[test]
    fn zero_error_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = QNetwork::new(3, &[4], &mut rng);
        let t = transition(vec![0.1, 0.2, 0.3], 2, 0.0, false);
        let target = net.forward(&t.observation)[2];
        let (loss, grads) = backward(&net, &[&t], &[target]);
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_weight_gradient_is_closed_form() {
        let mut net = QNetwork::zeros(1, &[]);
        let w = net.param_index(0, 3, 0);
        net.params_mut()[w] = 0.7;
        let x = 1.5;
        let t = transition(vec![x], 3, 0.0, false);
        let target = 0.25;
        let (_, grads) = backward(&net, &[&t], &[target]);
        let q = 0.7 * x;
        assert!((grads[w] - 2.0 * (q - target) * x).abs() < 1e-15);
        let other = net.param_index(0, 1, 0);
        assert_eq!(grads[other], 0.0);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 3.0, 1.0, 1.0, 1.0]), 1);
        assert_eq!(argmax(&[2.0; 5]), 0);
        let mut net = QNetwork::zeros(2, &[]);
        assert_eq!(act_greedy(&net, &[1.0, 1.0]), Action::LaneLeft);
        let b = net.param_index(0, 4, 2);
        net.params_mut()[b] = 0.1;
        assert_eq!(act_greedy(&net, &[1.0, 1.0]), Action::Slower);
    }

    #[test]
    #[should_panic(expected = "observation width")]
    fn shape_mismatch_is_rejected() {
        QNetwork::zeros(3, &[]).forward(&[1.0, 2.0]);
    }
}
