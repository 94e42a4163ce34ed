//! Small MLPs recorded on a [`Tape`], plus the Adam optimizer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{GradientMap, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Silu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Elu => tape.elu(x),
            Activation::Silu => tape.silu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Elu => "elu",
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "elu" => Some(Activation::Elu),
            "silu" => Some(Activation::Silu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Fully connected network. Weights are stored `[in, out]` so a batch
/// `[n, in]` maps to `[n, out]` with a single matmul.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes` lists every layer width including input and output. Weights
    /// and biases are drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; when
    /// `zero_output` is set the last layer starts at zero.
    pub fn new(sizes: &[usize], activation: Activation, zero_output: bool, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0), "invalid mlp sizes {sizes:?}");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let layers = sizes.len() - 1;
        for (l, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let last = l + 1 == layers;
            let mut draw = |n: usize| -> Vec<f64> {
                if last && zero_output {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            weights.push(Tensor::from_parts(vec![fan_in, fan_out], draw(fan_in * fan_out)));
            biases.push(Tensor::from_parts(vec![fan_out], draw(fan_out)));
        }
        Self { weights, biases, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().shape()[1]
    }

    /// Layer widths including input and output.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.weights.iter().map(|w| w.shape()[1]));
        s
    }

    /// Parameters in a fixed order: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Records the parameters on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<NodeId> {
        bind_params(tape, &self.params(), trainable)
    }

    /// Records `x -> mlp(x)` given parameter nodes from [`Mlp::bind`].
    pub fn forward(&self, tape: &mut Tape, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        if params.len() != 2 * self.weights.len() {
            return Err(Error::InvalidArgument(format!(
                "mlp expects {} parameter nodes, got {}",
                2 * self.weights.len(),
                params.len()
            )));
        }
        let layers = self.weights.len();
        let mut h = x;
        for l in 0..layers {
            h = tape.matmul(h, params[2 * l])?;
            h = tape.add_bias(h, params[2 * l + 1])?;
            if l + 1 < layers {
                h = self.activation.apply(tape, h)?;
            }
        }
        Ok(h)
    }
}

pub fn bind_params(tape: &mut Tape, params: &[&Tensor], trainable: bool) -> Vec<NodeId> {
    params
        .iter()
        .map(|p| if trainable { tape.leaf((*p).clone()) } else { tape.constant((*p).clone()) })
        .collect()
}

/// Adjoints of `ids` (zeros when untouched), shaped like `params`.
pub fn collect_grads(grads: &GradientMap, ids: &[NodeId], params: &[&Tensor]) -> Vec<Tensor> {
    ids.iter().zip(params).map(|(&id, p)| grads.get_or_zeros(id, p.shape())).collect()
}

pub fn flatten(tensors: &[Tensor]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.dot(g)).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// `target <- (1 - tau) * target + tau * online`, evaluated as
/// `target + tau * (online - target)` so equal tensors stay bitwise equal.
pub fn polyak_update(target: &mut [&mut Tensor], online: &[&Tensor], tau: f64) {
    for (t, o) in target.iter_mut().zip(online) {
        for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = if tau == 1.0 { *ov } else { *tv + tau * (ov - *tv) };
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[&Tensor], beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// Gradient-descent step on `params`. A zero learning rate leaves the
    /// parameters bit-identical.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                if lr != 0.0 {
                    let m_hat = *mi / bc1;
                    let v_hat = *vi / bc2;
                    *pi -= lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
    }

    /// Moments flattened for checkpointing: `[m..., v...]`.
    pub fn state_tensors(&self) -> Vec<Tensor> {
        self.m.iter().chain(&self.v).cloned().collect()
    }

    pub fn load_state(&mut self, step: u64, tensors: Vec<Tensor>) -> Result<()> {
        let n = self.m.len();
        if tensors.len() != 2 * n {
            return Err(Error::Checkpoint(format!("adam expects {} moment tensors, got {}", 2 * n, tensors.len())));
        }
        let mut it = tensors.into_iter();
        let m: Vec<Tensor> = it.by_ref().take(n).collect();
        let v: Vec<Tensor> = it.collect();
        for (a, b) in m.iter().chain(&v).zip(self.m.iter().chain(&self.v)) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint("adam moment shape mismatch".into()));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
