//! Replay buffer and the learned Gaussian dynamics model.
//!
//! The model maps `(features(s), a)` to a diagonal Gaussian over the state
//! delta `s' - s`. Inputs and targets are whitened with statistics that are
//! refreshed explicitly between training phases and otherwise frozen.

use rand::Rng;

use crate::checkpoint::{load_mlp, save_mlp, Archive};
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, collect_grads, Activation, Adam, Mlp};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;
const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// FIFO ring of simulator transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    /// Slot the next insert overwrites once the ring is full.
    write_cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, storage: Vec::new(), write_cursor: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.write_cursor] = t;
        }
        self.write_cursor = (self.write_cursor + 1) % self.capacity;
    }

    /// The `i`-th oldest transition.
    pub fn get(&self, i: usize) -> &Transition {
        if self.storage.len() < self.capacity {
            &self.storage[i]
        } else {
            &self.storage[(self.write_cursor + i) % self.capacity]
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub fn sample_indices(&self, rng: &mut impl Rng, n: usize) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.len())).collect()
    }

    pub fn save(&self, archive: &mut Archive, prefix: &str) {
        let n = self.len();
        archive.put_u64s(format!("{prefix}.meta"), vec![self.capacity as u64, n as u64]);
        if n == 0 {
            return;
        }
        let rows = |f: &dyn Fn(&Transition) -> Vec<f64>| {
            let data: Vec<f64> = self.iter().flat_map(f).collect();
            let w = data.len() / n;
            Tensor::from_parts(vec![n, w], data)
        };
        archive.put_tensor(format!("{prefix}.state"), &rows(&|t| t.state.clone()));
        archive.put_tensor(format!("{prefix}.action"), &rows(&|t| t.action.clone()));
        archive.put_tensor(format!("{prefix}.next_state"), &rows(&|t| t.next_state.clone()));
        archive.put_tensor(format!("{prefix}.reward"), &rows(&|t| vec![t.reward]));
        archive.put_u64s(format!("{prefix}.done"), self.iter().map(|t| t.done as u64).collect());
    }

    pub fn load(archive: &Archive, prefix: &str) -> Result<Self> {
        let meta = archive.u64s(&format!("{prefix}.meta"))?;
        let [capacity, n] = meta else {
            return Err(Error::Checkpoint("bad replay metadata".into()));
        };
        let mut buf = ReplayBuffer::new(*capacity as usize);
        if *n == 0 {
            return Ok(buf);
        }
        let s = archive.tensor(&format!("{prefix}.state"))?;
        let a = archive.tensor(&format!("{prefix}.action"))?;
        let s1 = archive.tensor(&format!("{prefix}.next_state"))?;
        let r = archive.tensor(&format!("{prefix}.reward"))?;
        let d = archive.u64s(&format!("{prefix}.done"))?;
        for i in 0..*n as usize {
            buf.push(Transition {
                state: s.row(i).to_vec(),
                action: a.row(i).to_vec(),
                next_state: s1.row(i).to_vec(),
                reward: r.data()[i],
                done: d[i] != 0,
            });
        }
        Ok(buf)
    }
}

/// Per-feature affine whitening.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Column statistics of `[n, d]` data; scales are floored to stay positive.
    pub fn fit(data: &Tensor) -> Self {
        let d = data.last_dim();
        let n = data.outer_len() as f64;
        let mut mean = vec![0.0; d];
        for r in 0..data.outer_len() {
            for (m, v) in mean.iter_mut().zip(data.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in 0..data.outer_len() {
            for ((s, v), m) in var.iter_mut().zip(data.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Self { mean, std }
    }

    pub fn normalize(&self, x: &Tensor) -> Tensor {
        let d = self.mean.len();
        let data = x.data().iter().enumerate().map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d]).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    fn rows(values: &[f64], n: usize) -> Tensor {
        let data = (0..n).flat_map(|_| values.iter().copied()).collect();
        Tensor::from_parts(vec![n, values.len()], data)
    }

    /// Records `(x - mean) / std` for `x: [n, d]`.
    pub fn normalize_on_tape(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let n = tape.value(x).outer_len();
        let shape = tape.shape(x).to_vec();
        let neg_mean = tape.constant(Tensor::vector(self.mean.iter().map(|m| -m).collect()));
        let centered = tape.add_bias(x, neg_mean)?;
        let inv = Self::rows(&self.std.iter().map(|s| 1.0 / s).collect::<Vec<_>>(), n).reshaped(shape)?;
        let inv = tape.constant(inv);
        tape.mul(centered, inv)
    }

    /// Records `x * std + mean`.
    pub fn denormalize_on_tape(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let n = tape.value(x).outer_len();
        let shape = tape.shape(x).to_vec();
        let scale = tape.constant(Self::rows(&self.std, n).reshaped(shape)?);
        let scaled = tape.mul(x, scale)?;
        let mean = tape.constant(Tensor::vector(self.mean.clone()));
        tape.add_bias(scaled, mean)
    }
}

/// Diagonal Gaussian over a vector quantity.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub log_std: Tensor,
}

/// Node ids of one model evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ModelNodes {
    /// Predicted next state in simulator units.
    pub mean: NodeId,
    /// Clamped log-std of the whitened delta.
    pub log_std_normalized: NodeId,
    /// Mean of the whitened delta.
    pub mean_normalized: NodeId,
}

#[derive(Clone, Debug)]
pub struct DynamicsModel {
    env: Env,
    pub net: Mlp,
    pub input_stats: NormStats,
    pub target_stats: NormStats,
    pub optimizer: Adam,
}

impl DynamicsModel {
    /// Fresh model with a zeroed output layer, so the initial mean prediction
    /// is the identity map.
    pub fn new(env: &Env, hidden: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        let spec = env.spec();
        let input = spec.obs_dim + spec.action_dim;
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * spec.state_dim);
        let net = Mlp::new(&sizes, activation, true, rng);
        Self::from_net(env, net)
    }

    fn from_net(env: &Env, net: Mlp) -> Self {
        let spec = env.spec();
        let optimizer = Adam::new(&net.params(), 0.7, 0.95);
        Self {
            env: env.clone(),
            input_stats: NormStats::identity(spec.obs_dim + spec.action_dim),
            target_stats: NormStats::identity(spec.state_dim),
            net,
            optimizer,
        }
    }

    /// A linear model `s' = A s + B a` encoded exactly in a hidden-layer-free
    /// network. Only valid for environments whose features are the raw state.
    pub fn from_linear(env: &Env, a: &Tensor, b: &Tensor, log_std: f64) -> Result<Self> {
        let spec = env.spec();
        let (sd, ad) = (spec.state_dim, spec.action_dim);
        if spec.obs_dim != sd {
            return Err(Error::InvalidArgument(format!("{} features are not the raw state", env.kind().name())));
        }
        if a.shape() != [sd, sd] || b.shape() != [sd, ad] {
            return Err(Error::shape("from_linear", &[a.shape(), b.shape()]));
        }
        let mut w = vec![0.0; (sd + ad) * 2 * sd];
        for j in 0..sd {
            for i in 0..sd {
                let eye = if i == j { 1.0 } else { 0.0 };
                w[i * 2 * sd + j] = a.data()[j * sd + i] - eye;
            }
            for i in 0..ad {
                w[(sd + i) * 2 * sd + j] = b.data()[j * ad + i];
            }
        }
        let mut bias = vec![0.0; 2 * sd];
        bias[sd..].iter_mut().for_each(|v| *v = log_std);
        let net = Mlp {
            weights: vec![Tensor::from_parts(vec![sd + ad, 2 * sd], w)],
            biases: vec![Tensor::from_parts(vec![2 * sd], bias)],
            activation: Activation::Silu,
        };
        Ok(Self::from_net(env, net))
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    /// Re-fits the whitening statistics to the buffer contents.
    pub fn refresh_normalization(&mut self, buffer: &ReplayBuffer) {
        if buffer.is_empty() {
            return;
        }
        let (inputs, deltas) = self.training_arrays(buffer, &(0..buffer.len()).collect::<Vec<_>>());
        self.input_stats = NormStats::fit(&inputs);
        self.target_stats = NormStats::fit(&deltas);
    }

    /// `([n, obs+act] inputs, [n, state] deltas)` for the chosen transitions.
    fn training_arrays(&self, buffer: &ReplayBuffer, idx: &[usize]) -> (Tensor, Tensor) {
        let spec = self.env.spec();
        let n = idx.len();
        let states: Vec<f64> = idx.iter().flat_map(|&i| buffer.get(i).state.iter().copied()).collect();
        let obs = self.env.observe(&Tensor::from_parts(vec![n, spec.state_dim], states));
        let mut inputs = Vec::with_capacity(n * (spec.obs_dim + spec.action_dim));
        let mut deltas = Vec::with_capacity(n * spec.state_dim);
        for (r, &i) in idx.iter().enumerate() {
            let t = buffer.get(i);
            inputs.extend_from_slice(obs.row(r));
            inputs.extend_from_slice(&t.action);
            deltas.extend(t.next_state.iter().zip(&t.state).map(|(a, b)| a - b));
        }
        (
            Tensor::from_parts(vec![n, spec.obs_dim + spec.action_dim], inputs),
            Tensor::from_parts(vec![n, spec.state_dim], deltas),
        )
    }

    fn head(&self, tape: &mut Tape, params: &[NodeId], inputs: NodeId) -> Result<(NodeId, NodeId)> {
        let sd = self.env.spec().state_dim;
        let x = self.input_stats.normalize_on_tape(tape, inputs)?;
        let h = self.net.forward(tape, params, x)?;
        let mean = tape.slice(h, 0, sd)?;
        let raw = tape.slice(h, sd, 2 * sd)?;
        let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX)?;
        Ok((mean, log_std))
    }

    fn as_rows(tape: &mut Tape, x: NodeId) -> Result<(NodeId, bool)> {
        if tape.shape(x).len() == 1 {
            let w = tape.shape(x)[0];
            Ok((tape.reshape(x, vec![1, w])?, true))
        } else {
            Ok((x, false))
        }
    }

    /// Records the model with parameters given as nodes (leaves when the
    /// caller wants model gradients, constants otherwise).
    pub fn forward_nodes(&self, tape: &mut Tape, params: &[NodeId], state: NodeId, action: NodeId) -> Result<ModelNodes> {
        let spec = self.env.spec();
        let (s, a) = (tape.shape(state).to_vec(), tape.shape(action).to_vec());
        if s.last() != Some(&spec.state_dim) || a.last() != Some(&spec.action_dim) || s[..s.len() - 1] != a[..a.len() - 1] {
            return Err(Error::shape("model_predict", &[&s, &a]));
        }
        let (state_rows, squeeze) = Self::as_rows(tape, state)?;
        let (action_rows, _) = Self::as_rows(tape, action)?;
        let obs = self.env.observe_on_tape(tape, state_rows)?;
        let inputs = tape.concat(&[obs, action_rows])?;
        let (mean_n, log_std_n) = self.head(tape, params, inputs)?;
        let delta = self.target_stats.denormalize_on_tape(tape, mean_n)?;
        let mut mean = tape.add(state_rows, delta)?;
        if squeeze {
            mean = tape.reshape(mean, s.clone())?;
        }
        Ok(ModelNodes { mean, log_std_normalized: log_std_n, mean_normalized: mean_n })
    }

    /// Records the mean next-state prediction at `(state, action)`; model
    /// weights enter as constants so gradients flow to the inputs only.
    pub fn predict_on_tape(&self, tape: &mut Tape, state: NodeId, action: NodeId) -> Result<NodeId> {
        let params = self.net.bind(tape, false);
        Ok(self.forward_nodes(tape, &params, state, action)?.mean)
    }

    /// Gaussian over the next state in simulator units.
    pub fn predict(&self, state: &Tensor, action: &Tensor) -> Result<GaussianParams> {
        if !state.all_finite() || !action.all_finite() {
            return Err(Error::NonFinite("model input".into()));
        }
        let mut tape = Tape::new();
        let s = tape.constant(state.clone());
        let a = tape.constant(action.clone());
        let params = self.net.bind(&mut tape, false);
        let nodes = self.forward_nodes(&mut tape, &params, s, a)?;
        let mean = tape.value(nodes.mean).clone();
        let ln_scale: Vec<f64> = self.target_stats.std.iter().map(|s| s.ln()).collect();
        let ls = tape.value(nodes.log_std_normalized);
        let data = (0..ls.outer_len()).flat_map(|r| ls.row(r).iter().zip(&ln_scale).map(|(a, b)| a + b)).collect();
        let log_std = Tensor::from_parts(mean.shape().to_vec(), data);
        Ok(GaussianParams { mean, log_std })
    }

    /// Mean per-transition negative log-likelihood in simulator units.
    pub fn evaluate_nll(&self, transitions: &[Transition]) -> Result<f64> {
        if transitions.is_empty() {
            return Err(Error::InvalidArgument("no transitions to evaluate".into()));
        }
        let sd = self.env.spec().state_dim;
        let ad = self.env.spec().action_dim;
        let n = transitions.len();
        let s = Tensor::from_parts(vec![n, sd], transitions.iter().flat_map(|t| t.state.clone()).collect());
        let a = Tensor::from_parts(vec![n, ad], transitions.iter().flat_map(|t| t.action.clone()).collect());
        let g = self.predict(&s, &a)?;
        let mut total = 0.0;
        for (i, t) in transitions.iter().enumerate() {
            for j in 0..sd {
                let ls = g.log_std.data()[i * sd + j];
                let z = (t.next_state[j] - g.mean.data()[i * sd + j]) / ls.exp();
                total += ls + 0.5 * z * z + crate::tape::HALF_LOG_2PI;
            }
        }
        Ok(total / n as f64)
    }

    /// Runs `steps` Adam steps of the whitened Gaussian NLL on uniform
    /// minibatches; `sample` draws the minibatch indices of step `k`.
    /// Returns the mean per-transition loss over the steps.
    pub fn model_update(
        &mut self,
        buffer: &ReplayBuffer,
        batch_size: usize,
        steps: usize,
        lr: f64,
        grad_clip: Option<f64>,
        mut sample: impl FnMut(usize, &ReplayBuffer) -> Vec<usize>,
    ) -> Result<f64> {
        if buffer.is_empty() {
            return Err(Error::InvalidArgument("model_update on an empty replay buffer".into()));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("model batch size must be positive".into()));
        }
        let mut total = 0.0;
        for k in 0..steps {
            let idx = sample(k, buffer);
            let (inputs, deltas) = self.training_arrays(buffer, &idx);
            let n = idx.len() as f64;
            let mut tape = Tape::new();
            let params = self.net.bind(&mut tape, true);
            let x = tape.constant(inputs);
            let (mean_n, log_std_n) = self.head(&mut tape, &params, x)?;
            let target = tape.constant(self.target_stats.normalize(&deltas));
            let nll = tape.gaussian_nll(mean_n, log_std_n, target)?;
            let loss = tape.scale(nll, 1.0 / n)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence(format!("model NLL is {value}")));
            }
            total += value;
            let grads = tape.backward(loss)?;
            let mut g = collect_grads(&grads, &params, &self.net.params());
            if let Some(c) = grad_clip {
                clip_grad_norm(&mut g, c);
            }
            self.optimizer.step(&mut self.net.params_mut(), &g, lr);
        }
        Ok(if steps == 0 { f64::NAN } else { total / steps as f64 })
    }

    pub fn save(&self, archive: &mut Archive, prefix: &str) {
        save_mlp(archive, &format!("{prefix}.net"), &self.net);
        archive.put_text(format!("{prefix}.env"), self.env.kind().name());
        archive.put_tensor(format!("{prefix}.input_mean"), &Tensor::vector(self.input_stats.mean.clone()));
        archive.put_tensor(format!("{prefix}.input_std"), &Tensor::vector(self.input_stats.std.clone()));
        archive.put_tensor(format!("{prefix}.target_mean"), &Tensor::vector(self.target_stats.mean.clone()));
        archive.put_tensor(format!("{prefix}.target_std"), &Tensor::vector(self.target_stats.std.clone()));
        archive.put_u64s(format!("{prefix}.opt_step"), vec![self.optimizer.step]);
        for (i, t) in self.optimizer.state_tensors().iter().enumerate() {
            archive.put_tensor(format!("{prefix}.opt{i}"), t);
        }
    }

    pub fn load(archive: &Archive, prefix: &str, env: &Env) -> Result<Self> {
        let net = load_mlp(archive, &format!("{prefix}.net"))?;
        let spec = env.spec();
        if net.input_dim() != spec.obs_dim + spec.action_dim || net.output_dim() != 2 * spec.state_dim {
            return Err(Error::Checkpoint(format!("model dimensions do not match {}", env.kind().name())));
        }
        let mut m = Self::from_net(env, net);
        let vec = |name: &str| -> Result<Vec<f64>> { Ok(archive.tensor(&format!("{prefix}.{name}"))?.data().to_vec()) };
        m.input_stats = NormStats { mean: vec("input_mean")?, std: vec("input_std")? };
        m.target_stats = NormStats { mean: vec("target_mean")?, std: vec("target_std")? };
        if archive.contains(&format!("{prefix}.opt_step")) {
            let n = 2 * m.net.params().len();
            let tensors = (0..n)
                .map(|i| archive.tensor(&format!("{prefix}.opt{i}")).cloned())
                .collect::<Result<Vec<_>>>()?;
            m.optimizer.load_state(archive.u64(&format!("{prefix}.opt_step"))?, tensors)?;
        }
        Ok(m)
    }
}
