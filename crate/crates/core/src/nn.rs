//! Minimal dense-network engine: forward/backward passes for
//! tanh-hidden/linear-output stacks, a diagonal-Gaussian policy head, a scalar
//! critic, and Adam with optional decoupled weight decay.
//!
//! Everything is 64-bit. Weights are initialized from a zero-mean uniform
//! distribution scaled by fan-in, `U(-g*sqrt(3/fan_in), g*sqrt(3/fan_in))`
//! (standard deviation `g/sqrt(fan_in)`), with gain `sqrt(2)` on hidden
//! layers; the policy output layer uses gain 0.01 and the value output gain 1.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::CoreError;

const LN_2PI: f64 = 1.8378770664093453;

/// Hidden-layer gain for the fan-in-scaled uniform initializer.
const HIDDEN_GAIN: f64 = std::f64::consts::SQRT_2;

/// Default hidden topology used by both actor and critic.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Row-major `fan_out x fan_in` weight matrix.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Fully connected stack with tanh on hidden layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
}

/// Post-activation record from a forward pass, consumed by `backward`.
///
/// `activations[0]` is the input; `activations[i]` the output of layer `i-1`
/// (tanh for hidden layers, raw for the last).
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub activations: Vec<Vec<f64>>,
}

/// Per-layer parameter gradients, same shapes as the network.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub dw: Vec<Vec<f64>>,
    pub db: Vec<Vec<f64>>,
}

impl NetGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        NetGrads {
            dw: net.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            db: net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &NetGrads, scale: f64) {
        for (a, b) in self.dw.iter_mut().zip(&other.dw) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
        for (a, b) in self.db.iter_mut().zip(&other.db) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn sq_norm(&self) -> f64 {
        let w: f64 = self.dw.iter().flatten().map(|g| g * g).sum();
        let b: f64 = self.db.iter().flatten().map(|g| g * g).sum();
        w + b
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.dw.iter_mut().flatten() {
            *g *= factor;
        }
        for g in self.db.iter_mut().flatten() {
            *g *= factor;
        }
    }
}

impl DenseNet {
    /// Build `sizes[0] -> ... -> sizes[n-1]` with fan-in-scaled uniform init;
    /// `output_gain` scales the final layer's weights.
    pub fn init(sizes: &[usize], output_gain: f64, rng: &mut ChaCha8Rng) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for i in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
            let gain = if i == sizes.len() - 2 {
                output_gain
            } else {
                HIDDEN_GAIN
            };
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            layers.push(Layer {
                w,
                b: vec![0.0; fan_out],
                fan_in,
                fan_out,
            });
        }
        DenseNet { layers }
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_len()];
        s.extend(self.layers.iter().map(|l| l.fan_out));
        s
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Forward pass returning the output and the activation record needed by
    /// [`DenseNet::backward`].
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache), CoreError> {
        if input.len() != self.input_len() {
            return Err(CoreError::DimMismatch(format!(
                "input length {} vs first layer fan-in {}",
                input.len(),
                self.input_len()
            )));
        }
        let n_layers = self.layers.len();
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(input.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let x = activations.last().unwrap();
            let mut z = affine(layer, x);
            if i + 1 < n_layers {
                for v in z.iter_mut() {
                    *v = v.tanh();
                }
            }
            activations.push(z);
        }
        let output = activations.last().unwrap().clone();
        Ok((output, ForwardCache { activations }))
    }

    /// Forward pass without building a cache (evaluation hot path).
    pub fn forward_only(&self, input: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.input_len());
        let n_layers = self.layers.len();
        let mut x = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = affine(layer, &x);
            if i + 1 < n_layers {
                for v in z.iter_mut() {
                    *v = v.tanh();
                }
            }
            x = z;
        }
        x
    }

    /// Exact reverse-mode gradients of a scalar loss given `d loss / d output`.
    /// Returns parameter gradients and the gradient w.r.t. the input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
    ) -> Result<(NetGrads, Vec<f64>), CoreError> {
        let n_layers = self.layers.len();
        if cache.activations.len() != n_layers + 1
            || cache
                .activations
                .iter()
                .zip(self.sizes())
                .any(|(a, s)| a.len() != s)
            || output_grad.len() != self.output_len()
        {
            return Err(CoreError::StaleCache);
        }
        let mut grads = NetGrads::zeros_like(self);
        let mut delta = output_grad.to_vec();
        for i in (0..n_layers).rev() {
            let layer = &self.layers[i];
            // Hidden layers: fold in tanh'(z) = 1 - a^2 using the stored
            // post-activation; the last layer is linear.
            if i + 1 < n_layers {
                let a = &cache.activations[i + 1];
                for (d, &act) in delta.iter_mut().zip(a) {
                    *d *= 1.0 - act * act;
                }
            }
            let a_prev = &cache.activations[i];
            let dw = &mut grads.dw[i];
            for (j, &dj) in delta.iter().enumerate() {
                let row = &mut dw[j * layer.fan_in..(j + 1) * layer.fan_in];
                for (w, &x) in row.iter_mut().zip(a_prev) {
                    *w += dj * x;
                }
            }
            grads.db[i].copy_from_slice(&delta);
            // delta_prev = W^T delta
            let mut delta_prev = vec![0.0; layer.fan_in];
            for (j, &dj) in delta.iter().enumerate() {
                let row = &layer.w[j * layer.fan_in..(j + 1) * layer.fan_in];
                for (dp, &w) in delta_prev.iter_mut().zip(row) {
                    *dp += w * dj;
                }
            }
            delta = delta_prev;
        }
        Ok((grads, delta))
    }
}

fn affine(layer: &Layer, x: &[f64]) -> Vec<f64> {
    let mut z = layer.b.clone();
    for (j, zj) in z.iter_mut().enumerate() {
        let row = &layer.w[j * layer.fan_in..(j + 1) * layer.fan_in];
        let mut acc = 0.0;
        for (w, v) in row.iter().zip(x) {
            acc += w * v;
        }
        *zj += acc;
    }
    z
}

/// Diagonal-Gaussian actor: a dense mean network plus a state-independent,
/// trainable log standard deviation per action dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mean_net: DenseNet,
    pub log_std: Vec<f64>,
}

/// Keeps the ratio in PPO well defined: a hard floor stops the policy from
/// going deterministic, the ceiling stops runaway exploration.
pub const LOG_STD_FLOOR: f64 = -5.0;
pub const LOG_STD_CEILING: f64 = 2.0;

impl GaussianPolicy {
    /// Standard 2x64 actor over flattened goal observations.
    pub fn new(obs_len: usize, act_len: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::with_hidden(obs_len, act_len, &DEFAULT_HIDDEN, rng)
    }

    pub fn with_hidden(
        obs_len: usize,
        act_len: usize,
        hidden: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut sizes = vec![obs_len];
        sizes.extend_from_slice(hidden);
        sizes.push(act_len);
        GaussianPolicy {
            mean_net: DenseNet::init(&sizes, 0.01, rng),
            log_std: vec![0.0; act_len],
        }
    }

    pub fn act_len(&self) -> usize {
        self.log_std.len()
    }

    /// Deterministic action: the mean of the action distribution.
    pub fn mean(&self, obs: &[f64]) -> Vec<f64> {
        self.mean_net.forward_only(obs)
    }

    /// Log density of `action` under the diagonal Gaussian at `obs`.
    pub fn log_prob(&self, obs: &[f64], action: &[f64]) -> f64 {
        let mean = self.mean_net.forward_only(obs);
        self.log_prob_given_mean(&mean, action)
    }

    /// Same as [`GaussianPolicy::log_prob`] with the mean already computed.
    pub fn log_prob_given_mean(&self, mean: &[f64], action: &[f64]) -> f64 {
        debug_assert_eq!(mean.len(), self.log_std.len());
        debug_assert_eq!(action.len(), self.log_std.len());
        let mut lp = 0.0;
        for i in 0..self.log_std.len() {
            let z = (action[i] - mean[i]) * (-self.log_std[i]).exp();
            lp += -0.5 * z * z - self.log_std[i] - 0.5 * LN_2PI;
        }
        lp
    }

    /// Sample `mean + sigma * eps` with standard-normal `eps`; the returned
    /// log-probability is exactly `log_prob(obs, action)`.
    pub fn sample(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
        let mean = self.mean_net.forward_only(obs);
        let action: Vec<f64> = mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| {
                let eps: f64 = rng.sample(StandardNormal);
                m + ls.exp() * eps
            })
            .collect();
        let lp = self.log_prob_given_mean(&mean, &action);
        (action, lp)
    }

    /// Differential entropy, independent of the observation:
    /// `sum_d (log_std_d + 0.5 ln(2*pi*e))`.
    pub fn entropy(&self) -> f64 {
        let per_dim = 0.5 * (LN_2PI + 1.0);
        self.log_std.iter().map(|ls| ls + per_dim).sum()
    }

    /// Clamp log_std into `[LOG_STD_FLOOR, LOG_STD_CEILING]`; call after every
    /// optimizer step.
    pub fn clamp_log_std(&mut self) {
        for ls in self.log_std.iter_mut() {
            *ls = ls.clamp(LOG_STD_FLOOR, LOG_STD_CEILING);
        }
    }
}

/// Scalar critic over the same flattened observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    pub net: DenseNet,
}

impl ValueNet {
    pub fn new(obs_len: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut sizes = vec![obs_len];
        sizes.extend_from_slice(&DEFAULT_HIDDEN);
        sizes.push(1);
        ValueNet {
            net: DenseNet::init(&sizes, 1.0, rng),
        }
    }

    pub fn value(&self, obs: &[f64]) -> f64 {
        self.net.forward_only(obs)[0]
    }
}

/// Adam over a fixed sequence of parameter blocks (one block per weight
/// matrix, bias vector, or the log_std vector). Decoupled weight decay is
/// applied to the parameters before the Adam delta.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// `block_sizes` fixes the number and size of parameter blocks this
    /// optimizer will update each step.
    pub fn new(block_sizes: &[usize], lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Advance the shared step counter; call once per optimizer step, before
    /// updating any block.
    pub fn next_step(&mut self) {
        self.t += 1;
    }

    /// Apply one bias-corrected Adam update to block `i`.
    pub fn step_block(
        &mut self,
        i: usize,
        params: &mut [f64],
        grads: &[f64],
    ) -> Result<(), CoreError> {
        if i >= self.m.len() || params.len() != self.m[i].len() || grads.len() != params.len() {
            return Err(CoreError::DimMismatch(format!(
                "adam block {i}: {} params, {} grads",
                params.len(),
                grads.len()
            )));
        }
        assert!(self.t > 0, "call next_step before step_block");
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let m = &mut self.m[i];
        let v = &mut self.v[i];
        let decay = 1.0 - self.lr * self.weight_decay;
        for j in 0..params.len() {
            if self.weight_decay > 0.0 {
                params[j] *= decay;
            }
            m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grads[j];
            v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grads[j] * grads[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            params[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
