//! Policy and value network with hand-written backpropagation.
//!
//! Parameters live in one flat `Vec<f64>` so that optimizers, checkpoints
//! and finite-difference checks treat every architecture the same way.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{OBS_LEN, OBS_SIZE};

pub const NUM_ACTIONS: usize = 5;
const HEAD_OUT: usize = NUM_ACTIONS + 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetworkError {
    #[error("observation has {got} values, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("parameter vector has {got} values, expected {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("unknown architecture `{0}` (expected small or pixel)")]
    UnknownArchitecture(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Flattened observation into rectified dense layers.
    Mlp { hidden: Vec<usize> },
    /// A kernel-1 convolution (one dense map shared by all pixels) with
    /// `channels` rectified outputs, then rectified dense layers.
    PixelMlp { channels: usize, hidden: Vec<usize> },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::Mlp { hidden: vec![64, 64] }
    }
}

impl Architecture {
    /// `small` is the default two-layer perceptron; `pixel` adds a
    /// 6-channel kernel-1 convolution in front of it.
    pub fn named(name: &str) -> Result<Architecture, NetworkError> {
        match name {
            "small" => Ok(Architecture::default()),
            "pixel" => Ok(Architecture::PixelMlp { channels: 6, hidden: vec![64, 64] }),
            other => Err(NetworkError::UnknownArchitecture(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layer {
    Dense { input: usize, output: usize, relu: bool, w: usize, b: usize },
    Pixel { pixels: usize, input: usize, output: usize, w: usize, b: usize },
}

impl Layer {
    fn out_len(self) -> usize {
        match self {
            Layer::Dense { output, .. } => output,
            Layer::Pixel { pixels, output, .. } => pixels * output,
        }
    }
}

/// Network shape. Stateless; parameters are passed in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Network {
    arch: Architecture,
    layers: Vec<Layer>,
    num_params: usize,
}

/// Forward-pass output for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub logits: [f64; NUM_ACTIONS],
    pub probs: [f64; NUM_ACTIONS],
    pub value: f64,
}

impl Output {
    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
}

pub fn softmax(z: &[f64; NUM_ACTIONS]) -> [f64; NUM_ACTIONS] {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; NUM_ACTIONS];
    let mut s = 0.0;
    for k in 0..NUM_ACTIONS {
        p[k] = (z[k] - m).exp();
        s += p[k];
    }
    for v in &mut p {
        *v /= s;
    }
    p
}

impl Network {
    pub fn new(arch: Architecture) -> Network {
        let mut layers = Vec::new();
        let mut off = 0;
        let mut width = OBS_LEN;
        let hidden = match &arch {
            Architecture::Mlp { hidden } => hidden.clone(),
            Architecture::PixelMlp { channels, hidden } => {
                let pixels = OBS_SIZE * OBS_SIZE;
                layers.push(Layer::Pixel { pixels, input: 3, output: *channels, w: off, b: off + 3 * channels });
                off += 3 * channels + channels;
                width = pixels * channels;
                hidden.clone()
            }
        };
        for h in hidden.into_iter().chain(std::iter::once(HEAD_OUT)) {
            layers.push(Layer::Dense { input: width, output: h, relu: true, w: off, b: off + width * h });
            off += width * h + h;
            width = h;
        }
        if let Some(Layer::Dense { relu, .. }) = layers.last_mut() {
            *relu = false;
        }
        Network { arch, layers, num_params: off }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    /// Uniform fan-in scaled weights, zero biases, and a small policy head
    /// so that initial action probabilities are close to uniform.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![0.0; self.num_params];
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let (fan_in, fan_out, w) = match *layer {
                Layer::Dense { input, output, w, .. } => (input, output, w),
                Layer::Pixel { input, output, w, .. } => (input, output, w),
            };
            let scale = (6.0 / fan_in as f64).sqrt() * if li == last { 0.1 } else { 1.0 };
            for v in &mut p[w..w + fan_in * fan_out] {
                *v = rng.gen_range(-scale..scale);
            }
        }
        p
    }

    pub fn check_params(&self, params: &[f64]) -> Result<(), NetworkError> {
        if params.len() != self.num_params {
            return Err(NetworkError::ParamCount { expected: self.num_params, got: params.len() });
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], obs: &[f64]) -> Result<Output, NetworkError> {
        let mut trace = Trace::default();
        self.forward_traced(params, obs, &mut trace)
    }

    pub fn forward_traced(&self, params: &[f64], obs: &[f64], trace: &mut Trace) -> Result<Output, NetworkError> {
        if obs.len() != OBS_LEN {
            return Err(NetworkError::ShapeMismatch { expected: OBS_LEN, got: obs.len() });
        }
        self.check_params(params)?;
        trace.acts.resize(self.layers.len(), Vec::new());
        for (li, layer) in self.layers.iter().enumerate() {
            let (before, rest) = trace.acts.split_at_mut(li);
            let x: &[f64] = if li == 0 { obs } else { &before[li - 1] };
            let out = &mut rest[0];
            out.clear();
            out.resize(layer.out_len(), 0.0);
            match *layer {
                Layer::Dense { input, output, relu, w, b } => {
                    out.copy_from_slice(&params[b..b + output]);
                    for (i, &xi) in x.iter().enumerate().take(input) {
                        if xi == 0.0 {
                            continue;
                        }
                        let row = &params[w + i * output..w + (i + 1) * output];
                        for (o, &wv) in out.iter_mut().zip(row) {
                            *o += xi * wv;
                        }
                    }
                    if relu {
                        for o in out.iter_mut() {
                            *o = o.max(0.0);
                        }
                    }
                }
                Layer::Pixel { pixels, input, output, w, b } => {
                    for px in 0..pixels {
                        let dst = &mut out[px * output..(px + 1) * output];
                        dst.copy_from_slice(&params[b..b + output]);
                        for k in 0..input {
                            let xi = x[px * input + k];
                            if xi == 0.0 {
                                continue;
                            }
                            for (c, o) in dst.iter_mut().enumerate() {
                                *o += xi * params[w + k * output + c];
                            }
                        }
                        for o in dst.iter_mut() {
                            *o = o.max(0.0);
                        }
                    }
                }
            }
        }
        let head = trace.acts.last().expect("network has a head");
        let mut logits = [0.0; NUM_ACTIONS];
        logits.copy_from_slice(&head[..NUM_ACTIONS]);
        Ok(Output { probs: softmax(&logits), logits, value: head[NUM_ACTIONS] })
    }

    /// Accumulates into `grad` the gradient for an upstream gradient
    /// `d_logits` and `d_value` at the head, using the trace of the forward
    /// pass on `obs`.
    pub fn backward(
        &self,
        params: &[f64],
        obs: &[f64],
        trace: &Trace,
        d_logits: &[f64; NUM_ACTIONS],
        d_value: f64,
        grad: &mut [f64],
    ) {
        let mut delta: Vec<f64> = d_logits.iter().copied().chain(std::iter::once(d_value)).collect();
        for li in (0..self.layers.len()).rev() {
            let x: &[f64] = if li == 0 { obs } else { &trace.acts[li - 1] };
            let out = &trace.acts[li];
            match self.layers[li] {
                Layer::Dense { input, output, relu, w, b } => {
                    if relu {
                        for (d, &o) in delta.iter_mut().zip(out) {
                            if o <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                    for (g, d) in grad[b..b + output].iter_mut().zip(&delta) {
                        *g += d;
                    }
                    let need_dx = li > 0;
                    let mut dx = if need_dx { vec![0.0; input] } else { Vec::new() };
                    for i in 0..input {
                        let xi = x[i];
                        let row = w + i * output;
                        if xi != 0.0 {
                            for (g, d) in grad[row..row + output].iter_mut().zip(&delta) {
                                *g += xi * d;
                            }
                        }
                        if need_dx {
                            dx[i] = params[row..row + output].iter().zip(&delta).map(|(wv, d)| wv * d).sum();
                        }
                    }
                    delta = dx;
                }
                Layer::Pixel { pixels, input, output, w, b } => {
                    for px in 0..pixels {
                        for c in 0..output {
                            let d = if out[px * output + c] > 0.0 { delta[px * output + c] } else { 0.0 };
                            if d == 0.0 {
                                continue;
                            }
                            grad[b + c] += d;
                            for k in 0..input {
                                grad[w + k * output + c] += x[px * input + k] * d;
                            }
                        }
                    }
                    // The pixel layer is always first, so no input gradient is needed.
                    delta = Vec::new();
                }
            }
        }
    }
}

/// Per-sample actor-critic loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub value: f64,
    pub entropy: f64,
}

/// Loss `-A log p(a) + c_v (G - V)^2 / 2 - c_e H(p)` for one sample, with the
/// advantage `A = G - V` held constant. Returns the loss and its gradient
/// with respect to the logits and the value.
pub fn a2c_loss(out: &Output, action: usize, ret: f64, w: LossWeights) -> (f64, [f64; NUM_ACTIONS], f64) {
    let adv = ret - out.value;
    let h = out.entropy();
    let loss = -adv * out.probs[action].max(1e-300).ln() + 0.5 * w.value * adv * adv - w.entropy * h;
    let mut dz = [0.0; NUM_ACTIONS];
    for k in 0..NUM_ACTIONS {
        let p = out.probs[k];
        let onehot = if k == action { 1.0 } else { 0.0 };
        let lp = if p > 0.0 { p.ln() } else { 0.0 };
        dz[k] = -adv * (onehot - p) + w.entropy * p * (lp + h);
    }
    (loss, dz, -w.value * adv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..OBS_LEN).map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen::<f64>() }).collect()
    }

    #[test]
    fn distribution_is_valid() {
        for arch in [Architecture::default(), Architecture::named("pixel").unwrap()] {
            let net = Network::new(arch);
            let p = net.init_params(3);
            let out = net.forward(&p, &obs(1)).unwrap();
            assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(out.probs.iter().all(|&q| q >= 0.0));
            assert!(out.value.is_finite());
        }
    }

    #[test]
    fn shape_mismatch() {
        let net = Network::new(Architecture::default());
        let p = net.init_params(3);
        assert_eq!(
            net.forward(&p, &[0.0; 10]).unwrap_err(),
            NetworkError::ShapeMismatch { expected: OBS_LEN, got: 10 }
        );
    }

    #[test]
    fn scaled_observation_changes_logits() {
        let net = Network::new(Architecture::default());
        let p = net.init_params(5);
        let zero = net.forward(&p, &vec![0.0; OBS_LEN]).unwrap();
        let o: Vec<f64> = obs(2).iter().map(|v| v * 0.5).collect();
        assert_ne!(zero.logits, net.forward(&p, &o).unwrap().logits);
    }

    /// The advantage is a constant in the loss, so for the check it is
    /// frozen at the value computed with the unperturbed parameters.
    #[test]
    fn gradient_matches_finite_differences_small_net() {
        for arch in [
            Architecture::Mlp { hidden: vec![6, 5] },
            Architecture::PixelMlp { channels: 2, hidden: vec![4] },
        ] {
            let net = Network::new(arch);
            // Nonzero biases keep pre-activations off the rectifier kink.
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let p: Vec<f64> = net.init_params(11).iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect();
            let w = LossWeights { value: 0.5, entropy: 0.003 };
            let batch: Vec<(Vec<f64>, usize, f64)> = (0..3).map(|i| (obs(20 + i), i as usize % 5, 1.0 + i as f64)).collect();
            let mut grad = vec![0.0; net.num_params()];
            let mut frozen = Vec::new();
            for (o, a, g) in &batch {
                let mut tr = Trace::default();
                let out = net.forward_traced(&p, o, &mut tr).unwrap();
                let (_, dz, dv) = a2c_loss(&out, *a, *g, w);
                frozen.push(g - out.value);
                net.backward(&p, o, &tr, &dz, dv, &mut grad);
            }
            // Loss with the policy-gradient advantage frozen.
            let loss = |q: &[f64]| -> f64 {
                batch
                    .iter()
                    .zip(&frozen)
                    .map(|((o, a, g), adv)| {
                        let out = net.forward(q, o).unwrap();
                        let v_err = g - out.value;
                        -adv * out.probs[*a].ln() + 0.5 * w.value * v_err * v_err - w.entropy * out.entropy()
                    })
                    .sum()
            };
            let h = 1e-6;
            let mut q = p.clone();
            for i in 0..net.num_params() {
                q[i] = p[i] + h;
                let up = loss(&q);
                q[i] = p[i] - h;
                let down = loss(&q);
                q[i] = p[i];
                let numeric = (up - down) / (2.0 * h);
                let err = (numeric - grad[i]).abs();
                assert!(err <= 1e-4 * numeric.abs().max(grad[i].abs()) + 1e-7, "param {i}: {numeric} vs {}", grad[i]);
            }
        }
    }
}
