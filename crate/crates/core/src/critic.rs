//! State-value critics and TD(λ) targets.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::{load_mlp, save_mlp, Archive};
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::nn::{bind_params, clip_grad_norm, collect_grads, polyak_update, Activation, Adam, Mlp};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// What a done flag does to the bootstrap value of its transition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DoneHandling {
    /// The tail value is replaced by zero.
    Terminate,
    /// The supplied next value (the pre-reset state's value) is kept; only
    /// the accumulation across the episode boundary is cut.
    BootstrapTimeout,
}

/// `V̂(s_t)` for every `(step, actor)` of a window, shape `[H, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTargetBatch {
    pub targets: Tensor,
}

/// TD(λ) targets for a window of `H` steps and `N` actors.
///
/// `rewards` and `dones` are `[H, N]`; `values` is `[H + 1, N]` where row
/// `h + 1` is the value of the state reached by transition `h`. Each target
/// mixes the `h`-step returns `V_h` with weights `(1-λ)λ^{h-1}`, the longest
/// available return taking the remaining weight. Done flags end a return.
pub fn td_lambda_targets(
    rewards: &Tensor,
    values: &Tensor,
    dones: &[Vec<bool>],
    gamma: f64,
    lambda: f64,
    handling: DoneHandling,
) -> Result<ValueTargetBatch> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside (0, 1)")));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    let [h, n] = rewards.shape() else {
        return Err(Error::shape("td_lambda_targets", &[rewards.shape(), values.shape()]));
    };
    let (h, n) = (*h, *n);
    if values.shape() != [h + 1, n] || dones.len() != h || dones.iter().any(|d| d.len() != n) {
        return Err(Error::shape("td_lambda_targets", &[rewards.shape(), values.shape()]));
    }
    let r = |t: usize, i: usize| rewards.data()[t * n + i];
    let v = |t: usize, i: usize| values.data()[t * n + i];
    let mut out = vec![0.0; h * n];
    for i in 0..n {
        // G_t = r_t + γ[(1-λ) V(s_{t+1}) + λ G_{t+1}], with G_H = V(s_H)
        let mut next_return = v(h, i);
        for t in (0..h).rev() {
            let g = if dones[t][i] {
                let tail = match handling {
                    DoneHandling::Terminate => 0.0,
                    DoneHandling::BootstrapTimeout => v(t + 1, i),
                };
                r(t, i) + gamma * tail
            } else {
                r(t, i) + gamma * ((1.0 - lambda) * v(t + 1, i) + lambda * next_return)
            };
            out[t * n + i] = g;
            next_return = g;
        }
    }
    Ok(ValueTargetBatch { targets: Tensor::from_parts(vec![h, n], out) })
}

/// One or more value heads over environment features, with an optional
/// Polyak-averaged target copy.
#[derive(Clone, Debug)]
pub struct Critic {
    env: Env,
    pub heads: Vec<Mlp>,
    pub target: Option<Vec<Mlp>>,
    pub tau: f64,
    pub optimizer: Adam,
}

impl Critic {
    pub fn new(
        env: &Env,
        hidden: &[usize],
        activation: Activation,
        ensemble: usize,
        target_tau: Option<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if ensemble == 0 {
            return Err(Error::InvalidArgument("critic ensemble must hold at least one head".into()));
        }
        if let Some(tau) = target_tau {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::InvalidArgument(format!("critic tau {tau} outside (0, 1]")));
            }
        }
        let mut sizes = vec![env.spec().obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let heads: Vec<Mlp> = (0..ensemble).map(|_| Mlp::new(&sizes, activation, false, rng)).collect();
        let target = target_tau.map(|_| heads.clone());
        let optimizer = Adam::new(&Self::flat_params(&heads), 0.7, 0.95);
        Ok(Self { env: env.clone(), heads, target, tau: target_tau.unwrap_or(1.0), optimizer })
    }

    fn flat_params(heads: &[Mlp]) -> Vec<&Tensor> {
        heads.iter().flat_map(|h| h.params()).collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        Self::flat_params(&self.heads)
    }

    pub fn ensemble_size(&self) -> usize {
        self.heads.len()
    }

    fn head_values(&self, tape: &mut Tape, heads: &[Mlp], params: &[Vec<NodeId>], state: NodeId) -> Result<Vec<NodeId>> {
        let obs = self.env.observe_on_tape(tape, state)?;
        let n = tape.value(obs).outer_len();
        heads
            .iter()
            .zip(params)
            .map(|(h, p)| {
                let out = h.forward(tape, p, obs)?;
                tape.reshape(out, vec![n])
            })
            .collect()
    }

    /// Records `min_k V_k(state)` with constant weights. `state` is
    /// `[n, state_dim]`; the result is `[n]`.
    pub fn value_on_tape(&self, tape: &mut Tape, state: NodeId, use_target: bool) -> Result<NodeId> {
        let heads = match (&self.target, use_target) {
            (Some(t), true) => t,
            _ => &self.heads,
        };
        let params: Vec<Vec<NodeId>> = heads.iter().map(|h| bind_params(tape, &h.params(), false)).collect();
        let values = self.head_values(tape, heads, &params, state)?;
        let mut v = values[0];
        for &other in &values[1..] {
            v = tape.minimum(v, other)?;
        }
        Ok(v)
    }

    /// Per-head values of `[n, state_dim]` states, `[heads][n]`.
    pub fn head_outputs(&self, states: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let params: Vec<Vec<NodeId>> = self.heads.iter().map(|h| bind_params(&mut tape, &h.params(), false)).collect();
        let values = self.head_values(&mut tape, &self.heads, &params, s)?;
        Ok(values.iter().map(|&v| tape.value(v).data().to_vec()).collect())
    }

    pub fn values(&self, states: &Tensor, use_target: bool) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let v = self.value_on_tape(&mut tape, s, use_target)?;
        Ok(tape.value(v).data().to_vec())
    }

    /// Minimum over heads for one state.
    pub fn ensemble_value(&self, state: &[f64]) -> Result<f64> {
        let s = Tensor::new(vec![1, state.len()], state.to_vec())?;
        Ok(self.values(&s, false)?[0])
    }

    /// Fits every head to `targets` by squared error over `mini_epochs`
    /// shuffled passes split into `minibatches` chunks, then moves the target
    /// copy by `tau`. Returns the mean loss over all optimizer steps.
    #[allow(clippy::too_many_arguments)]
    pub fn critic_update(
        &mut self,
        states: &Tensor,
        targets: &[f64],
        lr: f64,
        mini_epochs: usize,
        minibatches: usize,
        grad_clip: Option<f64>,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        let sd = self.env.spec().state_dim;
        let m = targets.len();
        if states.shape() != [m, sd] || m == 0 {
            return Err(Error::shape("critic_update", &[states.shape(), &[m]]));
        }
        let minibatches = minibatches.clamp(1, m);
        let mut order: Vec<usize> = (0..m).collect();
        let mut total = 0.0;
        let mut count = 0usize;
        for _ in 0..mini_epochs {
            order.shuffle(rng);
            for chunk in 0..minibatches {
                let lo = chunk * m / minibatches;
                let hi = (chunk + 1) * m / minibatches;
                let idx = &order[lo..hi];
                let b = idx.len();
                let s: Vec<f64> = idx.iter().flat_map(|&i| states.row(i).iter().copied()).collect();
                let y: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
                let mut tape = Tape::new();
                let params: Vec<Vec<NodeId>> = self.heads.iter().map(|h| h.bind(&mut tape, true)).collect();
                let s_node = tape.constant(Tensor::from_parts(vec![b, sd], s));
                let y_node = tape.constant(Tensor::from_parts(vec![b], y));
                let preds = self.head_values(&mut tape, &self.heads, &params, s_node)?;
                let mut loss_terms = Vec::new();
                for p in preds {
                    let err = tape.sub(p, y_node)?;
                    let sq = tape.square(err)?;
                    loss_terms.push(tape.mean(sq)?);
                }
                let mut loss = loss_terms[0];
                for &t in &loss_terms[1..] {
                    loss = tape.add(loss, t)?;
                }
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Divergence(format!("critic loss is {value}")));
                }
                total += value / self.heads.len() as f64;
                count += 1;
                let grads = tape.backward(loss)?;
                let ids: Vec<NodeId> = params.concat();
                let mut g = collect_grads(&grads, &ids, &self.params());
                if let Some(c) = grad_clip {
                    clip_grad_norm(&mut g, c);
                }
                let mut p: Vec<&mut Tensor> = self.heads.iter_mut().flat_map(|h| h.params_mut()).collect();
                self.optimizer.step(&mut p, &g, lr);
            }
        }
        self.sync_target();
        Ok(if count == 0 { f64::NAN } else { total / count as f64 })
    }

    /// `target <- (1 - tau) target + tau online`.
    pub fn sync_target(&mut self) {
        if let Some(target) = &mut self.target {
            let mut t: Vec<&mut Tensor> = target.iter_mut().flat_map(|h| h.params_mut()).collect();
            let online: Vec<&Tensor> = self.heads.iter().flat_map(|h| h.params()).collect();
            polyak_update(&mut t, &online, self.tau);
        }
    }

    pub fn save(&self, archive: &mut Archive, prefix: &str) {
        archive.put_u64s(format!("{prefix}.heads"), vec![self.heads.len() as u64]);
        archive.put_tensor(format!("{prefix}.tau"), &Tensor::scalar(self.tau));
        for (k, h) in self.heads.iter().enumerate() {
            save_mlp(archive, &format!("{prefix}.head{k}"), h);
        }
        if let Some(t) = &self.target {
            for (k, h) in t.iter().enumerate() {
                save_mlp(archive, &format!("{prefix}.target{k}"), h);
            }
        }
        archive.put_u64s(format!("{prefix}.opt_step"), vec![self.optimizer.step]);
        for (i, t) in self.optimizer.state_tensors().iter().enumerate() {
            archive.put_tensor(format!("{prefix}.opt{i}"), t);
        }
    }

    pub fn load(archive: &Archive, prefix: &str, env: &Env) -> Result<Self> {
        let k = archive.u64(&format!("{prefix}.heads"))? as usize;
        let tau = archive.tensor(&format!("{prefix}.tau"))?.item();
        let heads = (0..k).map(|i| load_mlp(archive, &format!("{prefix}.head{i}"))).collect::<Result<Vec<_>>>()?;
        if heads.iter().any(|h| h.input_dim() != env.spec().obs_dim || h.output_dim() != 1) {
            return Err(Error::Checkpoint("critic dimensions do not match environment".into()));
        }
        let target = if archive.contains(&format!("{prefix}.target0.sizes")) {
            Some((0..k).map(|i| load_mlp(archive, &format!("{prefix}.target{i}"))).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let mut optimizer = Adam::new(&Self::flat_params(&heads), 0.7, 0.95);
        let n = 2 * optimizer.m.len();
        let tensors = (0..n).map(|i| archive.tensor(&format!("{prefix}.opt{i}")).cloned()).collect::<Result<Vec<_>>>()?;
        optimizer.load_state(archive.u64(&format!("{prefix}.opt_step"))?, tensors)?;
        Ok(Self { env: env.clone(), heads, target, tau, optimizer })
    }
}
