//! Minimal fully connected networks with hand-written backpropagation.
//!
//! All value and policy networks in this crate are small ReLU MLPs, so the
//! implementation favors clarity and determinism over generality: f64
//! everywhere, flat parameter indexing (layer-major, weights before biases),
//! and plain SGD. [`numeric_gradient`] provides the central-difference
//! gradient used to validate every analytic gradient in the test suites.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// One dense layer, weights stored row-major (`out_dim x in_dim`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Fully connected ReLU network; the output layer is linear.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer activations cached during a forward pass.
pub struct Activations {
    /// Post-activation outputs of every layer, input excluded.
    outputs: Vec<Vec<f64>>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().expect("at least one layer")
    }
}

impl Mlp {
    /// He-initialized network with the given layer sizes, e.g.
    /// `[12, 64, 64, 5]`.
    pub fn new(dims: &[usize], rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|pair| {
                let (inp, out) = (pair[0], pair[1]);
                let scale = (2.0 / inp as f64).sqrt();
                Dense {
                    in_dim: inp,
                    out_dim: out,
                    w: (0..inp * out).map(|_| rng.gaussian() * scale).collect(),
                    b: vec![0.0; out],
                }
            })
            .collect();
        Mlp { layers }
    }

    /// Zero-initialized network (useful for tie-break tests).
    pub fn zeros(dims: &[usize]) -> Self {
        let mut rng = Rng::new(0);
        let mut net = Mlp::new(dims, &mut rng);
        for i in 0..net.param_len() {
            net.set_param(i, 0.0);
        }
        net
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().expect("nonempty").in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim
    }

    pub fn param_len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + l.b.len())
            .sum()
    }

    pub fn get_param(&self, mut idx: usize) -> f64 {
        for layer in &self.layers {
            if idx < layer.w.len() {
                return layer.w[idx];
            }
            idx -= layer.w.len();
            if idx < layer.b.len() {
                return layer.b[idx];
            }
            idx -= layer.b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut idx: usize, value: f64) {
        for layer in &mut self.layers {
            if idx < layer.w.len() {
                layer.w[idx] = value;
                return;
            }
            idx -= layer.w.len();
            if idx < layer.b.len() {
                layer.b[idx] = value;
                return;
            }
            idx -= layer.b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_cached(input).outputs.pop().expect("output")
    }

    pub fn forward_cached(&self, input: &[f64]) -> Activations {
        assert_eq!(input.len(), self.input_dim());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut current: &[f64] = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let last = i + 1 == self.layers.len();
            let mut out = Vec::with_capacity(layer.out_dim);
            for o in 0..layer.out_dim {
                let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                let mut sum = layer.b[o];
                for (w, x) in row.iter().zip(current) {
                    sum += w * x;
                }
                out.push(if last { sum } else { sum.max(0.0) });
            }
            outputs.push(out);
            current = outputs.last().expect("just pushed");
        }
        Activations { outputs }
    }

    /// Backpropagate `out_grad` (dL/d output) through the cached forward
    /// pass, accumulating into `grads`.
    pub fn backward(
        &self,
        input: &[f64],
        acts: &Activations,
        out_grad: &[f64],
        grads: &mut Gradients,
    ) {
        assert_eq!(out_grad.len(), self.output_dim());
        let mut delta = out_grad.to_vec();
        let mut offset_end = grads.0.len();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let layer_params = layer.w.len() + layer.b.len();
            let offset = offset_end - layer_params;
            let below: &[f64] = if i == 0 {
                input
            } else {
                &acts.outputs[i - 1]
            };
            // dL/db and dL/dW
            for o in 0..layer.out_dim {
                let d = delta[o];
                if d != 0.0 {
                    grads.0[offset + layer.w.len() + o] += d;
                    let wrow = offset + o * layer.in_dim;
                    for (j, &x) in below.iter().enumerate() {
                        grads.0[wrow + j] += d * x;
                    }
                }
            }
            // dL/d below, gated by the ReLU mask of the layer underneath
            if i > 0 {
                let mut next_delta = vec![0.0; layer.in_dim];
                for o in 0..layer.out_dim {
                    let d = delta[o];
                    if d != 0.0 {
                        let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                        for (j, &w) in row.iter().enumerate() {
                            next_delta[j] += d * w;
                        }
                    }
                }
                for (j, nd) in next_delta.iter_mut().enumerate() {
                    if acts.outputs[i - 1][j] <= 0.0 {
                        *nd = 0.0;
                    }
                }
                delta = next_delta;
            }
            offset_end = offset;
        }
    }

    /// Plain SGD step: `theta -= lr * grad`.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) {
        assert_eq!(grads.0.len(), self.param_len());
        let mut idx = 0;
        for layer in &mut self.layers {
            for w in &mut layer.w {
                *w -= lr * grads.0[idx];
                idx += 1;
            }
            for b in &mut layer.b {
                *b -= lr * grads.0[idx];
                idx += 1;
            }
        }
    }

    /// In-place parameter interpolation toward `other`:
    /// `theta += eps * (other - theta)`. Used by the Reptile outer loop.
    pub fn move_toward(&mut self, other: &Mlp, eps: f64) {
        for i in 0..self.param_len() {
            let current = self.get_param(i);
            self.set_param(i, current + eps * (other.get_param(i) - current));
        }
    }
}

/// Flat gradient buffer aligned with [`Mlp`] parameter indexing.
#[derive(Clone, Debug)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn zeros(net: &Mlp) -> Self {
        Gradients(vec![0.0; net.param_len()])
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.0 {
            *g *= factor;
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        assert_eq!(self.0.len(), other.0.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Reusable forward/backward buffers for allocation-free hot loops.
#[derive(Clone, Debug, Default)]
pub struct Scratch {
    layers: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
    batch_a: Vec<f64>,
    batch_b: Vec<f64>,
}

impl Scratch {
    fn prepare(&mut self, net: &Mlp) {
        let fits = self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(s, l)| s.len() == l.out_dim);
        if !fits {
            self.layers = net.layers.iter().map(|l| vec![0.0; l.out_dim]).collect();
            let widest = net.layers.iter().map(|l| l.out_dim.max(l.in_dim)).max().unwrap_or(0);
            self.delta = vec![0.0; widest];
            self.delta_next = vec![0.0; widest];
        }
    }
}

impl Mlp {
    /// Allocation-free forward pass; the output lives in `scratch`.
    pub fn forward_scratch<'s>(&self, input: &[f64], scratch: &'s mut Scratch) -> &'s [f64] {
        scratch.prepare(self);
        let n_layers = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let last = i + 1 == n_layers;
            // split_at_mut lets us read layer i-1 while writing layer i
            let (prev, rest) = scratch.layers.split_at_mut(i);
            let out = &mut rest[0];
            let below: &[f64] = if i == 0 { input } else { &prev[i - 1] };
            for o in 0..layer.out_dim {
                let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                let mut sum = layer.b[o];
                for (w, x) in row.iter().zip(below) {
                    sum += w * x;
                }
                out[o] = if last { sum } else { sum.max(0.0) };
            }
        }
        scratch.layers.last().expect("at least one layer")
    }

    /// Max output over a batch of input rows. The whole batch flows through
    /// each layer in turn so weight rows stay hot in cache.
    pub fn batch_max(&self, rows: &[[f64; 12]], scratch: &mut Scratch) -> f64 {
        if rows.is_empty() {
            return f64::NEG_INFINITY;
        }
        let batch = rows.len();
        let widest = self.layers.iter().map(|l| l.out_dim).max().unwrap_or(0);
        if scratch.batch_a.len() < batch * widest {
            scratch.batch_a.resize(batch * widest, 0.0);
            scratch.batch_b.resize(batch * widest, 0.0);
        }
        let n_layers = self.layers.len();
        let mut best = f64::NEG_INFINITY;
        for (i, layer) in self.layers.iter().enumerate() {
            let last = i + 1 == n_layers;
            let (input, output): (&[f64], &mut [f64]) = if i % 2 == 0 {
                (&scratch.batch_b, &mut scratch.batch_a)
            } else {
                (&scratch.batch_a, &mut scratch.batch_b)
            };
            for b in 0..batch {
                let below: &[f64] = if i == 0 {
                    &rows[b]
                } else {
                    &input[b * layer.in_dim..(b + 1) * layer.in_dim]
                };
                let out = &mut output[b * layer.out_dim..(b + 1) * layer.out_dim];
                for (o, slot) in out.iter_mut().enumerate() {
                    let wrow = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                    let mut sum = layer.b[o];
                    for (w, x) in wrow.iter().zip(below) {
                        sum += w * x;
                    }
                    *slot = if last {
                        best = best.max(sum);
                        sum
                    } else {
                        sum.max(0.0)
                    };
                }
            }
        }
        best
    }

    /// Max over one designated output head per row, batched like
    /// [`Mlp::batch_max`].
    pub fn batch_max_heads(
        &self,
        rows: &[[f64; 12]],
        heads: &[u8],
        scratch: &mut Scratch,
    ) -> f64 {
        if rows.is_empty() {
            return f64::NEG_INFINITY;
        }
        let batch = rows.len();
        let widest = self.layers.iter().map(|l| l.out_dim).max().unwrap_or(0);
        if scratch.batch_a.len() < batch * widest {
            scratch.batch_a.resize(batch * widest, 0.0);
            scratch.batch_b.resize(batch * widest, 0.0);
        }
        let n_layers = self.layers.len();
        let mut best = f64::NEG_INFINITY;
        for (i, layer) in self.layers.iter().enumerate() {
            let last = i + 1 == n_layers;
            let (input, output): (&[f64], &mut [f64]) = if i % 2 == 0 {
                (&scratch.batch_b, &mut scratch.batch_a)
            } else {
                (&scratch.batch_a, &mut scratch.batch_b)
            };
            for b in 0..batch {
                let below: &[f64] = if i == 0 {
                    &rows[b]
                } else {
                    &input[b * layer.in_dim..(b + 1) * layer.in_dim]
                };
                let out = &mut output[b * layer.out_dim..(b + 1) * layer.out_dim];
                if last {
                    // only the row's own head is needed
                    let o = heads[b] as usize;
                    let wrow = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                    let mut sum = layer.b[o];
                    for (w, x) in wrow.iter().zip(below) {
                        sum += w * x;
                    }
                    best = best.max(sum);
                } else {
                    for (o, slot) in out.iter_mut().enumerate() {
                        let wrow = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                        let mut sum = layer.b[o];
                        for (w, x) in wrow.iter().zip(below) {
                            sum += w * x;
                        }
                        *slot = sum.max(0.0);
                    }
                }
            }
        }
        best
    }

    /// Backpropagate through the activations left in `scratch` by the last
    /// [`Mlp::forward_scratch`] call on the same input.
    pub fn backward_scratch(
        &self,
        input: &[f64],
        out_grad: &[f64],
        scratch: &mut Scratch,
        grads: &mut Gradients,
    ) {
        let n_layers = self.layers.len();
        scratch.delta[..out_grad.len()].copy_from_slice(out_grad);
        let mut offset_end = grads.0.len();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let layer_params = layer.w.len() + layer.b.len();
            let offset = offset_end - layer_params;
            let below: &[f64] = if i == 0 {
                input
            } else {
                &scratch.layers[i - 1]
            };
            for o in 0..layer.out_dim {
                let d = scratch.delta[o];
                if d != 0.0 {
                    grads.0[offset + layer.w.len() + o] += d;
                    let wrow = offset + o * layer.in_dim;
                    for (j, &x) in below.iter().enumerate() {
                        grads.0[wrow + j] += d * x;
                    }
                }
            }
            if i > 0 {
                let next = &mut scratch.delta_next[..layer.in_dim];
                next.fill(0.0);
                for o in 0..layer.out_dim {
                    let d = scratch.delta[o];
                    if d != 0.0 {
                        let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                        for (j, &w) in row.iter().enumerate() {
                            next[j] += d * w;
                        }
                    }
                }
                for (j, nd) in next.iter_mut().enumerate() {
                    if scratch.layers[i - 1][j] <= 0.0 {
                        *nd = 0.0;
                    }
                }
                let _ = n_layers;
                scratch.delta[..layer.in_dim].copy_from_slice(next);
            }
            offset_end = offset;
        }
    }
}

/// Central-difference gradient of `loss` with respect to every parameter of
/// `net`. The independent oracle against which analytic gradients are
/// validated.
pub fn numeric_gradient(net: &mut Mlp, mut loss: impl FnMut(&Mlp) -> f64, eps: f64) -> Gradients {
    let mut grads = Gradients(vec![0.0; net.param_len()]);
    for i in 0..net.param_len() {
        let original = net.get_param(i);
        net.set_param(i, original + eps);
        let up = loss(net);
        net.set_param(i, original - eps);
        let down = loss(net);
        net.set_param(i, original);
        grads.0[i] = (up - down) / (2.0 * eps);
    }
    grads
}

/// Largest relative error between two gradient vectors.
pub fn max_relative_error(a: &Gradients, b: &Gradients) -> f64 {
    a.0.iter()
        .zip(&b.0)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(rng: &mut Rng, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| rng.f64() * 2.0 - 1.0).collect()
    }

    #[test]
    fn forward_shapes_and_relu() {
        let mut rng = Rng::new(1);
        let net = Mlp::new(&[4, 8, 3], &mut rng);
        let out = net.forward(&[0.1, -0.2, 0.3, 0.4]);
        assert_eq!(out.len(), 3);
        let acts = net.forward_cached(&[0.1, -0.2, 0.3, 0.4]);
        assert!(acts.outputs[0].iter().all(|&h| h >= 0.0));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[12, 16, 5]);
        assert!(net.forward(&[0.5; 12]).iter().all(|&y| y == 0.0));
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut rng = Rng::new(7);
        for trial in 0..10 {
            let mut net = Mlp::new(&[6, 10, 4], &mut rng);
            let inputs: Vec<Vec<f64>> = (0..5).map(|_| random_input(&mut rng, 6)).collect();
            let targets: Vec<Vec<f64>> = (0..5).map(|_| random_input(&mut rng, 4)).collect();

            // squared-error loss over the batch
            let loss = |net: &Mlp| -> f64 {
                inputs
                    .iter()
                    .zip(&targets)
                    .map(|(x, t)| {
                        net.forward(x)
                            .iter()
                            .zip(t)
                            .map(|(y, t)| (y - t) * (y - t))
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / inputs.len() as f64
            };

            let mut analytic = Gradients::zeros(&net);
            for (x, t) in inputs.iter().zip(&targets) {
                let acts = net.forward_cached(x);
                let out_grad: Vec<f64> = acts
                    .output()
                    .iter()
                    .zip(t)
                    .map(|(y, t)| 2.0 * (y - t) / inputs.len() as f64)
                    .collect();
                net.backward(x, &acts, &out_grad, &mut analytic);
            }
            let numeric = numeric_gradient(&mut net, loss, 1e-6);
            let err = max_relative_error(&analytic, &numeric);
            assert!(err <= 1e-5, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn scratch_paths_match_allocating_paths() {
        let mut rng = Rng::new(11);
        let net = Mlp::new(&[12, 64, 64, 5], &mut rng);
        let mut scratch = Scratch::default();
        for _ in 0..20 {
            let x: Vec<f64> = (0..12).map(|_| rng.f64()).collect();
            assert_eq!(net.forward(&x), net.forward_scratch(&x, &mut scratch));
        }
        // backward parity on a squared-error loss
        let x: Vec<f64> = (0..12).map(|_| rng.f64()).collect();
        let out_grad: Vec<f64> = (0..5).map(|_| rng.f64() - 0.5).collect();
        let acts = net.forward_cached(&x);
        let mut reference = Gradients::zeros(&net);
        net.backward(&x, &acts, &out_grad, &mut reference);
        net.forward_scratch(&x, &mut scratch);
        let mut fast = Gradients::zeros(&net);
        net.backward_scratch(&x, &out_grad, &mut scratch, &mut fast);
        for (a, b) in reference.0.iter().zip(&fast.0) {
            assert_eq!(a, b);
        }
        // batch_max parity
        let rows: Vec<[f64; 12]> = (0..7)
            .map(|_| std::array::from_fn(|_| rng.f64()))
            .collect();
        let naive = rows
            .iter()
            .flat_map(|r| net.forward(r))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(naive, net.batch_max(&rows, &mut scratch));
    }

    #[test]
    fn sgd_reduces_loss_on_fixed_target() {
        let mut rng = Rng::new(3);
        let mut net = Mlp::new(&[4, 12, 2], &mut rng);
        let x = [0.3, -0.7, 0.2, 0.9];
        let t = [1.0, -1.0];
        let loss_of = |net: &Mlp| {
            net.forward(&x)
                .iter()
                .zip(&t)
                .map(|(y, t)| (y - t) * (y - t))
                .sum::<f64>()
        };
        let mut prev = loss_of(&net);
        for _ in 0..200 {
            let acts = net.forward_cached(&x);
            let out_grad: Vec<f64> = acts
                .output()
                .iter()
                .zip(&t)
                .map(|(y, t)| 2.0 * (y - t))
                .collect();
            let mut grads = Gradients::zeros(&net);
            net.backward(&x, &acts, &out_grad, &mut grads);
            net.apply_gradients(&grads, 0.01);
            let now = loss_of(&net);
            assert!(now <= prev + 1e-9);
            prev = now;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn json_round_trip_preserves_parameters() {
        let mut rng = Rng::new(5);
        let net = Mlp::new(&[12, 64, 64, 5], &mut rng);
        let json = serde_json::to_string(&net).unwrap();
        let back: Mlp = serde_json::from_str(&json).unwrap();
        assert_eq!(net.param_len(), back.param_len());
        for i in (0..net.param_len()).step_by(97) {
            assert_eq!(net.get_param(i), back.get_param(i));
        }
        let x = [0.1; 12];
        assert_eq!(net.forward(&x), back.forward(&x));
    }

    #[test]
    fn move_toward_interpolates() {
        let mut rng = Rng::new(9);
        let mut a = Mlp::new(&[3, 4, 2], &mut rng);
        let b = Mlp::new(&[3, 4, 2], &mut rng);
        let original = a.clone();
        a.move_toward(&b, 1.0);
        for i in 0..a.param_len() {
            assert!((a.get_param(i) - b.get_param(i)).abs() < 1e-12);
        }
        let mut c = original.clone();
        c.move_toward(&b, 0.0);
        for i in 0..c.param_len() {
            assert_eq!(c.get_param(i), original.get_param(i));
        }
    }
}
