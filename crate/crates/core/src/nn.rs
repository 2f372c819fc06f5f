//! Small fully-connected networks with hand-written reverse mode.
//!
//! A [`DenseNet`] owns its parameters, gradient accumulators and momentum
//! buffers. `forward` returns a [`Tape`] of per-layer activations that
//! `backward` consumes; gradients accumulate until `sgd_step` applies and
//! clears them.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::common::{check_dim, Rng};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
    grad_w: Vec<f64>,
    grad_b: Vec<f64>,
    vel_w: Vec<f64>,
    vel_b: Vec<f64>,
}

impl Dense {
    pub fn new(weights: Vec<f64>, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        let outputs = bias.len();
        if outputs == 0 || weights.len() % outputs != 0 {
            return Err(Error::Config(format!(
                "{} weights do not form a matrix with {} rows",
                weights.len(),
                outputs
            )));
        }
        let inputs = weights.len() / outputs;
        Ok(Dense {
            inputs,
            outputs,
            grad_w: vec![0.0; weights.len()],
            grad_b: vec![0.0; outputs],
            vel_w: vec![0.0; weights.len()],
            vel_b: vec![0.0; outputs],
            weights,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`;
    /// zero bias.
    pub fn glorot(inputs: usize, outputs: usize, activation: Activation, rng: &mut Rng) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs).map(|_| rng.random_range(-a..=a)).collect();
        Dense::new(weights, vec![0.0; outputs], activation).expect("shape is consistent")
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| {
                let z: f64 = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b;
                self.activation.apply(z)
            })
            .collect()
    }
}

/// Activations recorded by [`DenseNet::forward`]: `values[0]` is the input,
/// `values[l + 1]` the output of layer `l`.
#[derive(Clone, Debug)]
pub struct Tape {
    values: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("tape holds the input at least")
    }

    pub fn input(&self) -> &[f64] {
        &self.values[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
}

impl DenseNet {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyInput("a network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            check_dim(pair[0].outputs, pair[1].inputs)?;
        }
        Ok(DenseNet { layers })
    }

    /// Glorot-initialized MLP with the given layer widths. Hidden layers use
    /// `hidden`, the last layer `output`.
    pub fn mlp(widths: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| Dense::glorot(w[0], w[1], if l == last { output } else { hidden }, rng))
            .collect();
        DenseNet::from_layers(layers)
    }

    /// Domain discriminator: `input -> hidden... -> 1`, ReLU hidden, sigmoid out.
    pub fn discriminator(input: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(1);
        DenseNet::mlp(&widths, Activation::Relu, Activation::Sigmoid, rng)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        check_dim(self.input_dim(), x.len())?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.to_vec());
        for layer in &self.layers {
            let next = layer.forward(values.last().expect("nonempty"));
            values.push(next);
        }
        let out = values.last().expect("nonempty").clone();
        Ok((out, Tape { values }))
    }

    /// Output only, no tape.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let mut cur = x.to_vec();
        for layer in &self.layers {
            cur = layer.forward(&cur);
        }
        Ok(cur)
    }

    /// Reverse pass for one forward. Adds `scale * dOut/dParam . upstream` to the
    /// parameter gradients and returns the input gradient.
    pub fn backward(&mut self, tape: &Tape, upstream: &[f64]) -> Result<Vec<f64>> {
        self.backward_scaled(tape, upstream, 1.0)
    }

    /// As [`backward`](Self::backward), with parameter gradients scaled by
    /// `param_scale` (0 leaves them untouched). The returned input gradient is
    /// never scaled.
    pub fn backward_scaled(&mut self, tape: &Tape, upstream: &[f64], param_scale: f64) -> Result<Vec<f64>> {
        if tape.values.len() != self.layers.len() + 1 {
            return Err(Error::Config(format!(
                "tape has {} entries for a {}-layer network",
                tape.values.len(),
                self.layers.len()
            )));
        }
        check_dim(self.output_dim(), upstream.len())?;
        let mut grad = upstream.to_vec();
        for (l, layer) in self.layers.iter_mut().enumerate().rev() {
            let input = &tape.values[l];
            let output = &tape.values[l + 1];
            check_dim(layer.inputs, input.len())?;
            check_dim(layer.outputs, output.len())?;
            // dL/dz
            for (g, &a) in grad.iter_mut().zip(output) {
                *g *= layer.activation.derivative_from_output(a);
            }
            let mut input_grad = vec![0.0; layer.inputs];
            for (o, &gz) in grad.iter().enumerate() {
                if gz == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                if param_scale != 0.0 {
                    let grow = &mut layer.grad_w[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, &x) in grow.iter_mut().zip(input) {
                        *gw += param_scale * gz * x;
                    }
                    layer.grad_b[o] += param_scale * gz;
                }
                for (ig, &w) in input_grad.iter_mut().zip(row) {
                    *ig += gz * w;
                }
            }
            grad = input_grad;
        }
        Ok(grad)
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            layer.grad_w.iter_mut().for_each(|g| *g = 0.0);
            layer.grad_b.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Momentum SGD with coupled weight decay:
    /// `buf = momentum * buf + (grad + wd * param)`, `param -= lr * buf`.
    /// Clears the gradients.
    pub fn sgd_step(&mut self, cfg: SgdConfig) {
        fn update(params: &mut [f64], grads: &mut [f64], vel: &mut [f64], cfg: SgdConfig) {
            for ((p, g), v) in params.iter_mut().zip(grads.iter_mut()).zip(vel.iter_mut()) {
                *v = cfg.momentum * *v + (*g + cfg.weight_decay * *p);
                *p -= cfg.lr * *v;
                *g = 0.0;
            }
        }
        for layer in &mut self.layers {
            update(&mut layer.weights, &mut layer.grad_w, &mut layer.vel_w, cfg);
            update(&mut layer.bias, &mut layer.grad_b, &mut layer.vel_b, cfg);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer, weights before bias.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        check_dim(self.param_count(), flat.len())?;
        let mut it = flat.iter().copied();
        for layer in &mut self.layers {
            layer.weights.iter_mut().chain(layer.bias.iter_mut()).for_each(|p| {
                *p = it.next().expect("length checked");
            });
        }
        Ok(())
    }

    /// Accumulated gradients in [`params`](Self::params) order.
    pub fn grads(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.grad_w.iter().chain(&l.grad_b).copied())
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    activation: l.activation,
                    weights: l.weights.clone(),
                    bias: l.bias.clone(),
                })
                .collect(),
        }
    }

    /// Rebuild from a checkpoint. Optimizer state starts from zero.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let layers = ckpt
            .layers
            .iter()
            .map(|r| {
                if r.weights.len() != r.inputs * r.outputs || r.bias.len() != r.outputs {
                    return Err(Error::Checkpoint(format!(
                        "layer {}x{} carries {} weights and {} biases",
                        r.outputs,
                        r.inputs,
                        r.weights.len(),
                        r.bias.len()
                    )));
                }
                Dense::new(r.weights.clone(), r.bias.clone(), r.activation)
            })
            .collect::<Result<Vec<_>>>()?;
        DenseNet::from_layers(layers)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        DenseNet::from_checkpoint(&serde_json::from_str(s)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "visga-densenet";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint layout:
///
/// ```json
/// {"format": "visga-densenet", "version": 1,
///  "layers": [{"inputs": 4, "outputs": 2, "activation": "relu",
///              "weights": [/* outputs*inputs, row-major */], "bias": [/* outputs */]}]}
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub layers: Vec<LayerRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Binary cross-entropy `-d ln p - (1 - d) ln(1 - p)` on the clamped
/// probability, with its derivative in `p`.
pub fn bce_loss(p: f64, d: u8) -> (f64, f64) {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let d = f64::from(d);
    let loss = -d * p.ln() - (1.0 - d) * (1.0 - p).ln();
    let grad = -d / p + (1.0 - d) / (1.0 - p);
    (loss, grad)
}

/// Gradient reversal. The forward pass is the identity; gradients flowing
/// back are multiplied by `-lambda`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrlSpec {
    pub lambda: f64,
}

impl GrlSpec {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("GRL lambda must be >= 0, got {lambda}")));
        }
        Ok(GrlSpec { lambda })
    }

    pub fn forward<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        x
    }
}

impl Default for GrlSpec {
    fn default() -> Self {
        GrlSpec { lambda: 1.0 }
    }
}

/// Backward pass of the reversal layer: `-lambda * grad`.
pub fn grl(input_grad: &[f64], spec: GrlSpec) -> Vec<f64> {
    input_grad.iter().map(|g| -spec.lambda * g).collect()
}
