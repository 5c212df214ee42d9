//! Dense feed-forward Q-network with hand-written backpropagation, SGD/Adam,
//! finite-difference gradient checking and a binary checkpoint format.
//!
//! Weights are stored input-major (`w[i * outputs + o]`) so that a forward
//! pass over a sparse one-hot input only touches the rows of active inputs.
//!
//! # Checkpoint layout
//!
//! All integers and floats are little-endian.
//!
//! | field        | type                         |
//! |--------------|------------------------------|
//! | magic        | 8 bytes `RPSQNET\0`          |
//! | version      | u32 (currently 1)            |
//! | activation   | u32 (0 = relu, 1 = linear)   |
//! | dim count    | u32 (`L + 1` for `L` layers) |
//! | dims         | `L + 1` × u64                |
//! | per layer    | `in × out` f64 weights (input-major), then `out` f64 biases |

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::par::Execution;

const MAGIC: &[u8; 8] = b"RPSQNET\0";
const FORMAT_VERSION: u32 = 1;
/// Samples per gradient chunk. Fixed so the reduction order never depends on threads.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input has length {got}, network expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("network needs at least an input and an output width, got {0:?}")]
    BadDims(Vec<usize>),
    #[error("layer dims differ: {0:?} vs {1:?}")]
    DimsMismatch(Vec<usize>, Vec<usize>),
    #[error("empty training batch")]
    EmptyBatch,
    #[error("batch is inconsistent: {0}")]
    BadBatch(String),
    #[error("loss is not finite ({0}); training diverged")]
    Diverged(f64),
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn tag(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Linear => 1,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Linear),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weight(&self, input: usize, output: usize) -> f64 {
        self.weights[input * self.outputs + output]
    }

    pub fn set_weight(&mut self, input: usize, output: usize, value: f64) {
        self.weights[input * self.outputs + output] = value;
    }

    pub fn bias(&self, output: usize) -> f64 {
        self.biases[output]
    }

    pub fn set_bias(&mut self, output: usize, value: f64) {
        self.biases[output] = value;
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    /// `z = b + Σ_i x_i · W[i, :]`, skipping zero inputs.
    fn affine(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.biases.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.outputs..(i + 1) * self.outputs];
            for (zo, &w) in z.iter_mut().zip(row) {
                *zo += xi * w;
            }
        }
        z
    }
}

/// Gradient (or optimizer moment) buffers shaped like a network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBuffers {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ParamBuffers {
    pub fn zeros_like(net: &QNetwork) -> Self {
        ParamBuffers {
            layers: net
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.biases.len()]))
                .collect(),
        }
    }

    /// Flattened view in checkpoint order (per layer: weights then biases).
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }
}

struct SampleGrad {
    squared_error: f64,
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    dims: Vec<usize>,
    layers: Vec<Layer>,
    activation: Activation,
}

impl QNetwork {
    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NnError::BadDims(dims.to_vec()));
        }
        let layers = dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(QNetwork {
            dims: dims.to_vec(),
            layers,
            activation,
        })
    }

    /// Uniform fan-in/fan-out scaled weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims, activation)?;
        for layer in &mut net.layers {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-limit..limit);
            }
        }
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_width(&self) -> usize {
        self.dims[0]
    }

    pub fn output_width(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_mut(&mut self, index: usize) -> &mut Layer {
        &mut self.layers[index]
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
            .collect()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_width() {
            return Err(NnError::InputWidth {
                expected: self.input_width(),
                got: input.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let last = self.layers.len() - 1;
        let mut a = input.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.affine(&a);
            if l != last {
                z.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            a = z;
        }
        Ok(a)
    }

    /// Pre-activations of every layer (the last one is the output).
    fn forward_trace(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let z = match l {
                0 => layer.affine(input),
                _ => {
                    let prev: Vec<f64> = zs[l - 1].iter().map(|&v| self.activation.apply(v)).collect();
                    layer.affine(&prev)
                }
            };
            zs.push(z);
        }
        zs
    }

    /// Backpropagates one sample of `Σ scale · (q[action] - target)²`. Returns
    /// the unscaled squared error, each layer's input activations (empty for
    /// layer 0, whose input is the sample itself) and each layer's output delta.
    fn sample_deltas(&self, input: &[f64], action: usize, target: f64, scale: f64) -> SampleGrad {
        let zs = self.forward_trace(input);
        let out = zs.last().unwrap();
        let err = out[action] - target;

        let n = self.layers.len();
        let mut acts: Vec<Vec<f64>> = vec![Vec::new(); n];
        for l in 1..n {
            acts[l] = zs[l - 1].iter().map(|&v| self.activation.apply(v)).collect();
        }
        let mut deltas: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut delta = vec![0.0; out.len()];
        delta[action] = 2.0 * scale * err;
        for l in (0..n).rev() {
            if l > 0 {
                let layer = &self.layers[l];
                let z_prev = &zs[l - 1];
                let mut next = vec![0.0; layer.inputs];
                for (i, nx) in next.iter_mut().enumerate() {
                    let deriv = self.activation.derivative(z_prev[i]);
                    if deriv == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[i * layer.outputs..(i + 1) * layer.outputs];
                    let s: f64 = row.iter().zip(&delta).map(|(w, d)| w * d).sum();
                    *nx = s * deriv;
                }
                deltas[l] = std::mem::replace(&mut delta, next);
            } else {
                deltas[0] = std::mem::take(&mut delta);
            }
        }
        SampleGrad {
            squared_error: err * err,
            acts,
            deltas,
        }
    }

    /// Mean masked squared error and its gradient, without touching parameters.
    ///
    /// Per-sample backward passes run in chunks (in parallel when available);
    /// the weight gradients are then summed in sample order, so the result does
    /// not depend on the execution path.
    pub fn loss_and_gradients(&self, batch: &TrainBatch, exec: Execution) -> Result<(f64, ParamBuffers)> {
        batch.validate(self)?;
        let n = batch.len();
        let scale = 1.0 / n as f64;
        let idx: Vec<usize> = (0..n).collect();
        let parts = exec.map_chunks(&idx, GRAD_CHUNK, |chunk| {
            chunk
                .iter()
                .map(|&k| self.sample_deltas(&batch.inputs[k], batch.actions[k], batch.targets[k], scale))
                .collect::<Vec<_>>()
        });
        let mut total = ParamBuffers::zeros_like(self);
        let mut sq = 0.0;
        for (k, sample) in parts.iter().flatten().enumerate() {
            sq += sample.squared_error;
            for (l, layer) in self.layers.iter().enumerate() {
                let (gw, gb) = &mut total.layers[l];
                let delta = &sample.deltas[l];
                for (g, d) in gb.iter_mut().zip(delta) {
                    *g += d;
                }
                let a_prev: &[f64] = if l == 0 { &batch.inputs[k] } else { &sample.acts[l] };
                for (i, &ai) in a_prev.iter().enumerate() {
                    if ai == 0.0 {
                        continue;
                    }
                    let row = &mut gw[i * layer.outputs..(i + 1) * layer.outputs];
                    for (g, d) in row.iter_mut().zip(delta) {
                        *g += ai * d;
                    }
                }
            }
        }
        Ok((sq * scale, total))
    }

    pub fn loss(&self, batch: &TrainBatch) -> Result<f64> {
        batch.validate(self)?;
        let mut sq = 0.0;
        for k in 0..batch.len() {
            let q = self.forward(&batch.inputs[k])?;
            let e = q[batch.actions[k]] - batch.targets[k];
            sq += e * e;
        }
        Ok(sq / batch.len() as f64)
    }

    /// One optimizer step on the masked MSE; returns the pre-step loss.
    pub fn train_batch(&mut self, opt: &mut Optimizer, batch: &TrainBatch) -> Result<f64> {
        self.train_batch_with(opt, batch, Execution::default())
    }

    pub fn train_batch_with(&mut self, opt: &mut Optimizer, batch: &TrainBatch, exec: Execution) -> Result<f64> {
        let (loss, grads) = self.loss_and_gradients(batch, exec)?;
        if !loss.is_finite() {
            return Err(NnError::Diverged(loss));
        }
        opt.apply(self, &grads)?;
        Ok(loss)
    }

    /// Copies every parameter of `self` into `target`.
    pub fn clone_into_target(&self, target: &mut QNetwork) -> Result<()> {
        if self.dims != target.dims {
            return Err(NnError::DimsMismatch(self.dims.clone(), target.dims.clone()));
        }
        for (src, dst) in self.layers.iter().zip(target.layers.iter_mut()) {
            dst.weights.copy_from_slice(&src.weights);
            dst.biases.copy_from_slice(&src.biases);
        }
        target.activation = self.activation;
        Ok(())
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.activation.tag().to_le_bytes())?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for layer in &self.layers {
            for v in layer.weights.iter().chain(&layer.biases) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let tag = read_u32(&mut r)?;
        let activation =
            Activation::from_tag(tag).ok_or_else(|| NnError::Checkpoint(format!("unknown activation tag {tag}")))?;
        let n = read_u32(&mut r)? as usize;
        if !(2..=64).contains(&n) {
            return Err(NnError::Checkpoint(format!("implausible dim count {n}")));
        }
        let mut dims = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            let d = u64::from_le_bytes(b);
            dims.push(usize::try_from(d).map_err(|_| NnError::Checkpoint(format!("dim {d} too large")))?);
        }
        let mut net = QNetwork::zeros(&dims, activation)?;
        let mut buf = [0u8; 8];
        for layer in &mut net.layers {
            for v in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
        }
        Ok(net)
    }

    pub fn save_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = File::create(path)?;
        self.save(BufWriter::new(f))
    }

    pub fn load_file(path: impl AsRef<Path>) -> Result<Self> {
        let f = File::open(path)?;
        Self::load(BufReader::new(f))
    }

    /// Parameter `k` in checkpoint order.
    fn param_mut(&mut self, mut k: usize) -> &mut f64 {
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            if k < nw {
                return &mut layer.weights[k];
            }
            k -= nw;
            if k < layer.biases.len() {
                return &mut layer.biases[k];
            }
            k -= layer.biases.len();
        }
        panic!("parameter index out of range");
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Regression samples: each target constrains only the output at `actions[k]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainBatch {
    pub inputs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub targets: Vec<f64>,
}

impl TrainBatch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, input: Vec<f64>, action: usize, target: f64) {
        self.inputs.push(input);
        self.actions.push(action);
        self.targets.push(target);
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn validate(&self, net: &QNetwork) -> Result<()> {
        if self.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        if self.actions.len() != self.len() || self.targets.len() != self.len() {
            return Err(NnError::BadBatch(format!(
                "{} inputs, {} actions, {} targets",
                self.len(),
                self.actions.len(),
                self.targets.len()
            )));
        }
        for x in &self.inputs {
            net.check_input(x)?;
        }
        if let Some(&a) = self.actions.iter().find(|&&a| a >= net.output_width()) {
            return Err(NnError::BadBatch(format!("action index {a} out of range")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    first_moment: Option<ParamBuffers>,
    second_moment: Option<ParamBuffers>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, net: &QNetwork) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(NnError::BadLearningRate(learning_rate));
        }
        let (m, v) = match kind {
            OptimizerKind::Sgd => (None, None),
            OptimizerKind::Adam => (Some(ParamBuffers::zeros_like(net)), Some(ParamBuffers::zeros_like(net))),
        };
        Ok(Optimizer {
            kind,
            learning_rate,
            step: 0,
            first_moment: m,
            second_moment: v,
        })
    }

    pub fn sgd(learning_rate: f64, net: &QNetwork) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate, net)
    }

    pub fn adam(learning_rate: f64, net: &QNetwork) -> Result<Self> {
        Self::new(OptimizerKind::Adam, learning_rate, net)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, net: &mut QNetwork, grads: &ParamBuffers) -> Result<()> {
        if grads.layers.len() != net.layers.len() {
            return Err(NnError::DimsMismatch(net.dims.clone(), vec![grads.layers.len()]));
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                let g = grads.layers.iter().flat_map(|(w, b)| w.iter().chain(b.iter()));
                for (p, gi) in net.params_mut().zip(g) {
                    *p -= lr * gi;
                }
            }
            OptimizerKind::Adam => {
                let m = self.first_moment.as_mut().expect("adam state");
                let v = self.second_moment.as_mut().expect("adam state");
                let t = self.step as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                let g = grads.layers.iter().flat_map(|(w, b)| w.iter().chain(b.iter()));
                let ms = m.layers.iter_mut().flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()));
                let vs = v.layers.iter_mut().flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()));
                for (((p, &gi), mi), vi) in net.params_mut().zip(g).zip(ms).zip(vs) {
                    *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                    *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                    let m_hat = *mi / bc1;
                    let v_hat = *vi / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
                }
            }
        }
        Ok(())
    }
}

/// Relative-error floor so parameters with (near) zero gradient compare on an absolute scale.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-7;

/// Worst relative error between backprop and central finite differences over
/// every parameter, for the masked MSE of `batch`.
pub fn gradient_check(net: &QNetwork, batch: &TrainBatch, epsilon: f64) -> Result<f64> {
    let (_, analytic) = net.loss_and_gradients(batch, Execution::Sequential)?;
    let analytic = analytic.flat();
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        let original = *probe.param_mut(k);
        *probe.param_mut(k) = original + epsilon;
        let plus = probe.loss(batch)?;
        *probe.param_mut(k) = original - epsilon;
        let minus = probe.loss(batch)?;
        *probe.param_mut(k) = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let denom = a.abs().max(numeric.abs()).max(GRADIENT_CHECK_FLOOR);
        let rel = (a - numeric).abs() / denom;
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_input(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    /// Straight-line matrix-multiply forward pass, written independently of `Layer::affine`.
    fn oracle_forward(net: &QNetwork, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let n = net.layers().len();
        for (l, layer) in net.layers().iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs());
            for o in 0..layer.outputs() {
                let mut s = layer.bias(o);
                for (i, ai) in a.iter().enumerate() {
                    s += layer.weight(i, o) * ai;
                }
                if l + 1 < n && net.activation() == Activation::Relu && s < 0.0 {
                    s = 0.0;
                }
                out.push(s);
            }
            a = out;
        }
        a
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = QNetwork::zeros(&[7, 5, 3], Activation::Relu).unwrap();
        let x = random_input(7, &mut rng(1));
        assert_eq!(net.forward(&x).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_single_layer_reproduces_input() {
        let mut net = QNetwork::zeros(&[3, 3], Activation::Linear).unwrap();
        for i in 0..3 {
            net.layer_mut(0).set_weight(i, i, 1.0);
        }
        let x = vec![0.25, -1.5, 3.0];
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn forward_matches_matmul_oracle() {
        let mut r = rng(42);
        for _ in 0..10 {
            let net = QNetwork::new(&[4, 5, 3], Activation::Relu, &mut r).unwrap();
            let x = random_input(4, &mut r);
            let got = net.forward(&x).unwrap();
            let want = oracle_forward(&net, &x);
            for (g, w) in got.iter().zip(&want) {
                assert_relative_eq!(g, w, max_relative = 1e-12, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = QNetwork::zeros(&[4, 3], Activation::Relu).unwrap();
        assert!(matches!(
            net.forward(&[1.0, 2.0]),
            Err(NnError::InputWidth { expected: 4, got: 2 })
        ));
        assert!(QNetwork::zeros(&[4], Activation::Relu).is_err());
        assert!(QNetwork::zeros(&[4, 0, 3], Activation::Relu).is_err());
    }

    #[test]
    fn already_fit_batch_leaves_sgd_params_unchanged() {
        let mut r = rng(3);
        let mut net = QNetwork::new(&[4, 6, 3], Activation::Relu, &mut r).unwrap();
        let mut batch = TrainBatch::new();
        for k in 0..5 {
            let x = random_input(4, &mut r);
            let q = net.forward(&x).unwrap();
            batch.push(x, k % 3, q[k % 3]);
        }
        let before = net.clone();
        let mut opt = Optimizer::sgd(0.1, &net).unwrap();
        let loss = net.train_batch(&mut opt, &batch).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(net, before);
    }

    #[test]
    fn one_weight_sgd_step_matches_closed_form() {
        // q = w·x + b, L = (q - y)², dL/dw = 2(q - y)x.
        let (w, b, x, y, lr) = (0.7, -0.2, 1.5, 2.0, 0.05);
        let mut net = QNetwork::zeros(&[1, 1], Activation::Linear).unwrap();
        net.layer_mut(0).set_weight(0, 0, w);
        net.layer_mut(0).set_bias(0, b);
        let mut batch = TrainBatch::new();
        batch.push(vec![x], 0, y);
        let mut opt = Optimizer::sgd(lr, &net).unwrap();
        let loss = net.train_batch(&mut opt, &batch).unwrap();
        let q: f64 = w * x + b;
        assert_relative_eq!(loss, (q - y).powi(2), max_relative = 1e-15);
        let expect_w = w - lr * 2.0 * (q - y) * x;
        let expect_b = b - lr * 2.0 * (q - y);
        assert_relative_eq!(net.layers()[0].weight(0, 0), expect_w, max_relative = 1e-15);
        assert_relative_eq!(net.layers()[0].bias(0), expect_b, max_relative = 1e-15);
    }

    #[test]
    fn single_sample_training_converges() {
        let mut r = rng(9);
        let mut net = QNetwork::new(&[4, 8, 3], Activation::Relu, &mut r).unwrap();
        let mut batch = TrainBatch::new();
        batch.push(vec![0.5, -0.25, 1.0, 0.1], 1, 1.3);
        let mut opt = Optimizer::sgd(0.01, &net).unwrap();
        let mut prev = f64::INFINITY;
        let mut last = 0.0;
        for _ in 0..1000 {
            last = net.train_batch(&mut opt, &batch).unwrap();
            assert!(last <= prev + 1e-15, "loss went up: {prev} -> {last}");
            prev = last;
        }
        assert!(last < 1e-8, "final loss {last}");
    }

    #[test]
    fn small_lr_loss_is_non_increasing() {
        let mut r = rng(11);
        let mut net = QNetwork::new(&[5, 7, 3], Activation::Relu, &mut r).unwrap();
        let mut batch = TrainBatch::new();
        batch.push(random_input(5, &mut r), 2, -0.8);
        let mut opt = Optimizer::sgd(1e-3, &net).unwrap();
        let mut prev = net.loss(&batch).unwrap();
        for _ in 0..100 {
            net.train_batch(&mut opt, &batch).unwrap();
            let now = net.loss(&batch).unwrap();
            assert!(now <= prev, "{prev} -> {now}");
            prev = now;
        }
    }

    #[test]
    fn empty_batch_and_divergence_are_errors() {
        let mut net = QNetwork::zeros(&[2, 3], Activation::Relu).unwrap();
        let mut opt = Optimizer::sgd(0.1, &net).unwrap();
        assert!(matches!(net.train_batch(&mut opt, &TrainBatch::new()), Err(NnError::EmptyBatch)));
        let mut batch = TrainBatch::new();
        batch.push(vec![1.0, 1.0], 0, f64::INFINITY);
        assert!(matches!(net.train_batch(&mut opt, &batch), Err(NnError::Diverged(_))));
        assert!(Optimizer::adam(0.0, &net).is_err());
    }

    #[test]
    fn gradient_check_linear_net() {
        let mut r = rng(5);
        let net = QNetwork::new(&[2, 3], Activation::Linear, &mut r).unwrap();
        let mut batch = TrainBatch::new();
        batch.push(random_input(2, &mut r), 1, 0.3);
        assert!(gradient_check(&net, &batch, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn gradient_check_relu_hidden_layer() {
        let mut r = rng(6);
        let net = QNetwork::new(&[4, 6, 3], Activation::Relu, &mut r).unwrap();
        let mut batch = TrainBatch::new();
        for k in 0..4 {
            batch.push(random_input(4, &mut r), k % 3, r.gen_range(-1.0..1.0));
        }
        assert!(gradient_check(&net, &batch, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn gradient_check_zero_case_is_exact() {
        let net = QNetwork::zeros(&[3, 4, 3], Activation::Relu).unwrap();
        let mut batch = TrainBatch::new();
        batch.push(vec![0.0; 3], 0, 0.0);
        let (_, g) = net.loss_and_gradients(&batch, Execution::Sequential).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
        assert_eq!(gradient_check(&net, &batch, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn target_sync_semantics() {
        let mut r = rng(8);
        let mut online = QNetwork::new(&[4, 5, 3], Activation::Relu, &mut r).unwrap();
        let mut target = QNetwork::new(&[4, 5, 3], Activation::Relu, &mut r).unwrap();
        online.clone_into_target(&mut target).unwrap();
        let x = random_input(4, &mut r);
        assert_eq!(online.forward(&x).unwrap(), target.forward(&x).unwrap());
        let snapshot = target.clone();
        online.clone_into_target(&mut target).unwrap();
        assert_eq!(target, snapshot);

        let mut opt = Optimizer::adam(0.01, &online).unwrap();
        let mut batch = TrainBatch::new();
        batch.push(x, 0, 5.0);
        online.train_batch(&mut opt, &batch).unwrap();
        assert_ne!(online.params_flat(), target.params_flat());
        assert_eq!(target, snapshot);

        let mut wrong = QNetwork::zeros(&[4, 3], Activation::Relu).unwrap();
        assert!(online.clone_into_target(&mut wrong).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut r = rng(10);
        let net = QNetwork::new(&[6, 4, 3], Activation::Relu, &mut r).unwrap();
        let mut bytes = Vec::new();
        net.save(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes.len(), 8 + 4 + 4 + 4 + 3 * 8 + net.num_params() * 8);
        let back = QNetwork::load(bytes.as_slice()).unwrap();
        let x = random_input(6, &mut r);
        let a: Vec<u64> = net.forward(&x).unwrap().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.forward(&x).unwrap().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);

        bytes[0] = b'X';
        assert!(QNetwork::load(bytes.as_slice()).is_err());
    }

    #[test]
    fn sparse_skip_matches_dense_accumulation() {
        let mut r = rng(12);
        let net = QNetwork::new(&[9, 4, 3], Activation::Relu, &mut r).unwrap();
        let x = vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let got = net.forward(&x).unwrap();
        let want = oracle_forward(&net, &x);
        for (g, w) in got.iter().zip(&want) {
            assert_relative_eq!(g, w, max_relative = 1e-12, epsilon = 1e-15);
        }
    }
}
