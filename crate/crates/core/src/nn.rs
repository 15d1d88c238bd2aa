//! Dense feed-forward networks with hand-written backpropagation and Adam.
//!
//! Parameters live in one flat `Vec<f64>`; each layer contributes its weight
//! matrix (row-major, `outputs x inputs`) followed by its bias. Gradients use
//! the same flat layout, which keeps the optimizer and norm clipping trivial.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("input has {got} components, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("layer {index} takes {inputs} inputs but the previous layer emits {previous}")]
    BrokenChain {
        index: usize,
        inputs: usize,
        previous: usize,
    },
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("network parameters contain a non-finite value")]
    NonFinite,
    #[error("network needs at least one layer")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn param_count(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRepr")]
pub struct Mlp {
    layers: Vec<LayerShape>,
    params: Vec<f64>,
}

#[derive(Deserialize)]
struct MlpRepr {
    layers: Vec<LayerShape>,
    params: Vec<f64>,
}

impl TryFrom<MlpRepr> for Mlp {
    type Error = NetError;

    fn try_from(repr: MlpRepr) -> Result<Self, Self::Error> {
        Mlp::from_parts(repr.layers, repr.params)
    }
}

/// Per-layer outputs retained for the backward pass. Reusable across samples.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    activations: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl Mlp {
    /// Builds a network over `sizes = [input, hidden.., output]` with weights
    /// uniform in `±1/sqrt(fan_in)` and zero biases.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let n = sizes.len() - 1;
        let layers: Vec<LayerShape> = (0..n)
            .map(|i| LayerShape {
                inputs: sizes[i],
                outputs: sizes[i + 1],
                activation: if i + 1 == n { output } else { hidden },
            })
            .collect();
        let mut params = Vec::with_capacity(layers.iter().map(LayerShape::param_count).sum());
        for layer in &layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for _ in 0..layer.inputs * layer.outputs {
                params.push(rng.gen_range(-bound..bound));
            }
            params.extend(std::iter::repeat_n(0.0, layer.outputs));
        }
        Self { layers, params }
    }

    pub fn from_parts(layers: Vec<LayerShape>, params: Vec<f64>) -> Result<Self, NetError> {
        if layers.is_empty() {
            return Err(NetError::Empty);
        }
        for (index, pair) in layers.windows(2).enumerate() {
            if pair[1].inputs != pair[0].outputs {
                return Err(NetError::BrokenChain {
                    index: index + 1,
                    inputs: pair[1].inputs,
                    previous: pair[0].outputs,
                });
            }
        }
        let expected: usize = layers.iter().map(LayerShape::param_count).sum();
        if params.len() != expected {
            return Err(NetError::ParamCount {
                expected,
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(NetError::NonFinite);
        }
        Ok(Self { layers, params })
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    /// Multiplies the final layer's weights and bias by `factor`.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let last = self.layers[self.layers.len() - 1];
        let start = self.params.len() - last.param_count();
        for p in &mut self.params[start..] {
            *p *= factor;
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NetError> {
        if input.len() != self.input_dim() {
            return Err(NetError::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(self.eval(input))
    }

    /// Forward pass without the dimension check. Panics on mismatched input.
    pub fn eval(&self, input: &[f64]) -> Vec<f64> {
        assert_eq!(input.len(), self.input_dim(), "network input dimension");
        let mut current = input.to_vec();
        let mut offset = 0;
        for layer in &self.layers {
            let (weights, rest) = self.params[offset..].split_at(layer.inputs * layer.outputs);
            let bias = &rest[..layer.outputs];
            let next: Vec<f64> = weights
                .chunks_exact(layer.inputs)
                .zip(bias)
                .map(|(row, b)| layer.activation.apply(dot(row, &current) + b))
                .collect();
            offset += layer.param_count();
            current = next;
        }
        current
    }

    /// Forward pass that records activations into `trace` for [`Mlp::backward`].
    pub fn forward_trace(&self, input: &[f64], trace: &mut Trace) {
        assert_eq!(input.len(), self.input_dim(), "network input dimension");
        trace.activations.resize_with(self.layers.len() + 1, Vec::new);
        trace.activations[0].clear();
        trace.activations[0].extend_from_slice(input);
        let mut offset = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let (done, todo) = trace.activations.split_at_mut(i + 1);
            let x = &done[i];
            let y = &mut todo[0];
            y.clear();
            let (weights, rest) = self.params[offset..].split_at(layer.inputs * layer.outputs);
            let bias = &rest[..layer.outputs];
            y.extend(
                weights
                    .chunks_exact(layer.inputs)
                    .zip(bias)
                    .map(|(row, b)| layer.activation.apply(dot(row, x) + b)),
            );
            offset += layer.param_count();
        }
    }

    /// Accumulates into `grad` the parameter gradient of a scalar loss whose
    /// gradient with respect to the network output is `output_grad`.
    pub fn backward(&self, trace: &mut Trace, output_grad: &[f64], grad: &mut [f64]) {
        assert_eq!(output_grad.len(), self.output_dim(), "output gradient dimension");
        assert_eq!(grad.len(), self.params.len(), "gradient buffer size");
        let n = self.layers.len();
        let Trace {
            activations,
            delta,
            delta_prev,
        } = trace;
        let last = &self.layers[n - 1];
        delta.clear();
        delta.extend(
            output_grad
                .iter()
                .zip(&activations[n])
                .map(|(g, y)| g * last.activation.derivative_from_output(*y)),
        );
        let mut end = self.params.len();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let start = end - layer.param_count();
            let x = &activations[i];
            let (gw, gb) = grad[start..end].split_at_mut(layer.inputs * layer.outputs);
            for ((row, gbo), &d) in gw.chunks_exact_mut(layer.inputs).zip(gb.iter_mut()).zip(delta.iter()) {
                if d == 0.0 {
                    continue;
                }
                for (g, xj) in row.iter_mut().zip(x) {
                    *g += d * xj;
                }
                *gbo += d;
            }
            if i > 0 {
                let weights = &self.params[start..start + layer.inputs * layer.outputs];
                delta_prev.clear();
                delta_prev.resize(layer.inputs, 0.0);
                for (row, &d) in weights.chunks_exact(layer.inputs).zip(delta.iter()) {
                    if d == 0.0 {
                        continue;
                    }
                    for (acc, w) in delta_prev.iter_mut().zip(row) {
                        *acc += d * w;
                    }
                }
                let prev_act = self.layers[i - 1].activation;
                for (dp, y) in delta_prev.iter_mut().zip(x) {
                    *dp *= prev_act.derivative_from_output(*y);
                }
                std::mem::swap(delta, delta_prev);
            }
            end = start;
        }
    }

    /// Parameter gradient for a single input, freshly allocated.
    pub fn gradient(&self, input: &[f64], output_grad: &[f64]) -> Result<Vec<f64>, NetError> {
        if input.len() != self.input_dim() {
            return Err(NetError::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        if output_grad.len() != self.output_dim() {
            return Err(NetError::DimensionMismatch {
                expected: self.output_dim(),
                got: output_grad.len(),
            });
        }
        let mut trace = Trace::default();
        let mut grad = self.zero_grad();
        self.forward_trace(input, &mut trace);
        self.backward(&mut trace, output_grad, &mut grad);
        Ok(grad)
    }
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`. Returns the original norm.
pub fn clip_grad_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
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

/// Bias-corrected adaptive-moment optimizer state for one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    timestep: u64,
}

impl Adam {
    pub fn new(param_count: usize, config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            timestep: 0,
        }
    }

    pub fn timestep(&self) -> u64 {
        self.timestep
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.first_moment.len(), "Adam parameter count");
        assert_eq!(grads.len(), params.len(), "Adam gradient count");
        self.timestep += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.timestep as i32;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);
        let step_size = learning_rate / correction1;
        let sqrt_c2 = correction2.sqrt();
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= step_size * *m / (v.sqrt() / sqrt_c2 + epsilon);
        }
    }
}
