//! Rollout construction, policy losses and the training epoch.
//!
//! Three gradient pathways share one rollout skeleton:
//!
//! * decoupled: states come from the simulator, but each next-state node is a
//!   gradient swap whose backward pass runs through the learned model's mean
//!   evaluated at the simulator state and action;
//! * true: states and gradients both come from the differentiable simulator;
//! * model forward: the learned model produces both.

use std::time::Instant;

use crate::actor::{entropy_constant, Actor, EntropyTemperature, StdMode};
use crate::checkpoint::Archive;
use crate::config::{ExperimentConfig, LrSchedule};
use crate::critic::{td_lambda_targets, Critic, DoneHandling};
use crate::dynamics_model::{DynamicsModel, ReplayBuffer, Transition};
use crate::envs::{BatchState, Env};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, collect_grads, flatten};
use crate::rng::{standard_normal, stream, StreamRole};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AlgoVariant {
    DmoBptt,
    DmoShac,
    DmoSapo,
    ShacTrue,
    BpttTrue,
    ModelForward,
}

/// Where next states and their Jacobians come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pathway {
    Decoupled,
    True,
    ModelForward,
}

impl AlgoVariant {
    pub const ALL: [AlgoVariant; 6] = [
        AlgoVariant::DmoBptt,
        AlgoVariant::DmoShac,
        AlgoVariant::DmoSapo,
        AlgoVariant::ShacTrue,
        AlgoVariant::BpttTrue,
        AlgoVariant::ModelForward,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn name(self) -> &'static str {
        match self {
            AlgoVariant::DmoBptt => "dmo_bptt",
            AlgoVariant::DmoShac => "dmo_shac",
            AlgoVariant::DmoSapo => "dmo_sapo",
            AlgoVariant::ShacTrue => "shac_true",
            AlgoVariant::BpttTrue => "bptt_true",
            AlgoVariant::ModelForward => "model_forward",
        }
    }

    pub fn pathway(self) -> Pathway {
        match self {
            AlgoVariant::DmoBptt | AlgoVariant::DmoShac | AlgoVariant::DmoSapo => Pathway::Decoupled,
            AlgoVariant::ShacTrue | AlgoVariant::BpttTrue => Pathway::True,
            AlgoVariant::ModelForward => Pathway::ModelForward,
        }
    }

    pub fn uses_model(self) -> bool {
        self.pathway() != Pathway::True
    }

    pub fn uses_critic(self) -> bool {
        !self.is_bptt()
    }

    pub fn is_bptt(self) -> bool {
        matches!(self, AlgoVariant::DmoBptt | AlgoVariant::BpttTrue)
    }

    pub fn is_sapo(self) -> bool {
        self == AlgoVariant::DmoSapo
    }
}

/// One `H`-step batched rollout recorded on a tape.
#[derive(Clone, Debug)]
pub struct TrajectoryWindow {
    /// Window-initial states; recorded as constants so no gradient history
    /// crosses the window boundary.
    pub initial_states: Tensor,
    /// State nodes `s_0 .. s_H` (`[N, state_dim]`), post-reset.
    pub states: Vec<NodeId>,
    pub actions: Vec<NodeId>,
    /// On-tape rewards `r(s_h, a_h)`, `[N]` each.
    pub rewards: Vec<NodeId>,
    /// Analytic pre-squash policy entropy per step when requested.
    pub entropies: Option<Vec<NodeId>>,
    /// Reward values, `[H, N]`.
    pub raw_rewards: Tensor,
    pub dones: Vec<Vec<bool>>,
    /// Next-state nodes before any auto-reset, one per step.
    pub terminal_states: Vec<NodeId>,
    /// Values of `s_0 .. s_{H-1}`.
    pub state_values: Vec<Tensor>,
    /// Values of the pre-reset next states.
    pub terminal_values: Vec<Tensor>,
    /// Batch after the window.
    pub final_batch: BatchState,
    /// Simulator transitions; empty for model-forward windows.
    pub transitions: Vec<Transition>,
}

impl TrajectoryWindow {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

/// Per-step standard normal action noise for an epoch, `H` tensors of
/// `[N, action_dim]`.
pub fn window_noise(seed: u64, epoch: u64, horizon: usize, n: usize, action_dim: usize) -> Vec<Tensor> {
    (0..horizon)
        .map(|h| standard_normal(&mut stream(seed, StreamRole::ActionNoise, &[epoch, h as u64]), &[n, action_dim]))
        .collect()
}

fn row_mask(n: usize, width: usize, keep: impl Fn(usize) -> bool) -> Tensor {
    let data = (0..n).flat_map(|r| std::iter::repeat_n(if keep(r) { 1.0 } else { 0.0 }, width)).collect();
    Tensor::from_parts(vec![n, width], data)
}

/// Rows of `reset` where `dones` is set, zeros elsewhere.
fn reset_rows(reset: &Tensor, dones: &[bool]) -> Tensor {
    let data = dones
        .iter()
        .enumerate()
        .flat_map(|(r, &d)| reset.row(r).iter().map(move |&v| if d { v } else { 0.0 }))
        .collect();
    Tensor::from_parts(reset.shape().to_vec(), data)
}

/// Shared state of a rollout under construction.
struct Recorder {
    states: Vec<NodeId>,
    actions: Vec<NodeId>,
    rewards: Vec<NodeId>,
    entropies: Option<Vec<NodeId>>,
    raw_rewards: Vec<f64>,
    dones: Vec<Vec<bool>>,
    terminal_states: Vec<NodeId>,
    state_values: Vec<Tensor>,
    terminal_values: Vec<Tensor>,
    transitions: Vec<Transition>,
}

impl Recorder {
    fn new(with_entropy: bool) -> Self {
        Self {
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            entropies: with_entropy.then(Vec::new),
            raw_rewards: Vec::new(),
            dones: Vec::new(),
            terminal_states: Vec::new(),
            state_values: Vec::new(),
            terminal_values: Vec::new(),
            transitions: Vec::new(),
        }
    }

    /// Records the policy and reward at the current state node.
    fn act(
        &mut self,
        tape: &mut Tape,
        env: &Env,
        actor: &Actor,
        params: &[NodeId],
        state: NodeId,
        noise: &Tensor,
    ) -> Result<(NodeId, Tensor)> {
        let out = actor.act_on_tape(tape, params, state, noise)?;
        let reward = env.reward_on_tape(tape, state, out.action)?;
        if let Some(ent) = &mut self.entropies {
            let s = tape.sum_last(out.log_std)?;
            ent.push(tape.offset(s, entropy_constant(actor.action_dim()))?);
        }
        self.actions.push(out.action);
        self.rewards.push(reward);
        let values = tape.value(reward).data().to_vec();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("reward at step {}", self.actions.len() - 1)));
        }
        self.raw_rewards.extend_from_slice(&values);
        Ok((out.action, tape.value(out.action).clone()))
    }

    fn finish(self, initial_states: Tensor, final_batch: BatchState) -> TrajectoryWindow {
        let h = self.actions.len();
        let n = initial_states.outer_len();
        TrajectoryWindow {
            initial_states,
            states: self.states,
            actions: self.actions,
            rewards: self.rewards,
            entropies: self.entropies,
            raw_rewards: Tensor::from_parts(vec![h, n], self.raw_rewards),
            dones: self.dones,
            terminal_states: self.terminal_states,
            state_values: self.state_values,
            terminal_values: self.terminal_values,
            final_batch,
            transitions: self.transitions,
        }
    }
}

fn push_transitions(out: &mut Vec<Transition>, states: &Tensor, actions: &Tensor, next: &Tensor, rewards: &[f64], dones: &[bool]) {
    for r in 0..states.outer_len() {
        out.push(Transition {
            state: states.row(r).to_vec(),
            action: actions.row(r).to_vec(),
            next_state: next.row(r).to_vec(),
            reward: rewards[r],
            done: dones[r],
        });
    }
}

fn check_noise(noise: &[Tensor], n: usize, ad: usize) -> Result<()> {
    if noise.is_empty() || noise.iter().any(|t| t.shape() != [n, ad]) {
        return Err(Error::InvalidArgument(format!("noise must be H >= 1 tensors of shape [{n}, {ad}]")));
    }
    Ok(())
}

/// Simulator-forward, model-backward rollout.
#[allow(clippy::too_many_arguments)]
pub fn rollout_decoupled(
    tape: &mut Tape,
    env: &Env,
    model: &DynamicsModel,
    actor: &Actor,
    actor_params: &[NodeId],
    batch: &BatchState,
    noise: &[Tensor],
    with_entropy: bool,
) -> Result<TrajectoryWindow> {
    check_noise(noise, batch.len(), env.spec().action_dim)?;
    let sd = env.spec().state_dim;
    let mut rec = Recorder::new(with_entropy);
    let mut batch = batch.clone();
    let mut s = tape.constant(batch.states.clone());
    rec.states.push(s);
    for eps in noise {
        let (a, a_val) = rec.act(tape, env, actor, actor_params, s, eps)?;
        let step = env.batch_step(&batch, &a_val)?;
        let mean = model.predict_on_tape(tape, s, a)?;
        let any_done = step.dones.iter().any(|&d| d);
        let next = if any_done {
            let keep = tape.constant(row_mask(batch.len(), sd, |r| !step.dones[r]));
            let kept = tape.mul(mean, keep)?;
            tape.grad_swap(kept, step.next.states.clone())?
        } else {
            tape.grad_swap(mean, step.next.states.clone())?
        };
        let terminal = if any_done { tape.grad_swap(mean, step.terminal_states.clone())? } else { next };
        rec.state_values.push(batch.states.clone());
        push_transitions(&mut rec.transitions, &batch.states, &a_val, &step.terminal_states, &step.rewards, &step.dones);
        rec.terminal_values.push(step.terminal_states);
        rec.terminal_states.push(terminal);
        rec.dones.push(step.dones);
        rec.states.push(next);
        s = next;
        batch = step.next;
    }
    let initial = tape.value(rec.states[0]).clone();
    Ok(rec.finish(initial, batch))
}

/// Rollout differentiated through the simulator itself.
pub fn rollout_true(
    tape: &mut Tape,
    env: &Env,
    actor: &Actor,
    actor_params: &[NodeId],
    batch: &BatchState,
    noise: &[Tensor],
    with_entropy: bool,
) -> Result<TrajectoryWindow> {
    check_noise(noise, batch.len(), env.spec().action_dim)?;
    let sd = env.spec().state_dim;
    let mut rec = Recorder::new(with_entropy);
    let mut batch = batch.clone();
    let mut s = tape.constant(batch.states.clone());
    rec.states.push(s);
    for eps in noise {
        let (a, a_val) = rec.act(tape, env, actor, actor_params, s, eps)?;
        let step = env.batch_step(&batch, &a_val)?;
        let terminal = env.dynamics_on_tape(tape, s, a)?;
        let next = if step.dones.iter().any(|&d| d) {
            let keep = tape.constant(row_mask(batch.len(), sd, |r| !step.dones[r]));
            let kept = tape.mul(terminal, keep)?;
            let fresh = tape.constant(reset_rows(&step.next.states, &step.dones));
            tape.add(kept, fresh)?
        } else {
            terminal
        };
        rec.state_values.push(batch.states.clone());
        push_transitions(&mut rec.transitions, &batch.states, &a_val, &step.terminal_states, &step.rewards, &step.dones);
        rec.terminal_values.push(step.terminal_states);
        rec.terminal_states.push(terminal);
        rec.dones.push(step.dones);
        rec.states.push(next);
        s = next;
        batch = step.next;
    }
    let initial = tape.value(rec.states[0]).clone();
    Ok(rec.finish(initial, batch))
}

/// Rollout unrolled and differentiated entirely through the learned model.
/// Episode bookkeeping follows the batch counters, with resets drawn from the
/// same per-row streams the simulator uses; the simulator is never stepped.
#[allow(clippy::too_many_arguments)]
pub fn rollout_model_forward(
    tape: &mut Tape,
    env: &Env,
    model: &DynamicsModel,
    actor: &Actor,
    actor_params: &[NodeId],
    batch: &BatchState,
    noise: &[Tensor],
    with_entropy: bool,
) -> Result<TrajectoryWindow> {
    check_noise(noise, batch.len(), env.spec().action_dim)?;
    let sd = env.spec().state_dim;
    let mut rec = Recorder::new(with_entropy);
    let mut batch = batch.clone();
    let mut s = tape.constant(batch.states.clone());
    rec.states.push(s);
    for (h, eps) in noise.iter().enumerate() {
        let (a, _) = rec.act(tape, env, actor, actor_params, s, eps)?;
        let terminal = model.predict_on_tape(tape, s, a)?;
        let predicted = tape.value(terminal).clone();
        if !predicted.all_finite() {
            return Err(Error::NonFinite(format!("model prediction at step {h}")));
        }
        let (advanced, dones) = env.advance_batch(&batch, &predicted);
        let next = if dones.iter().any(|&d| d) {
            let keep = tape.constant(row_mask(batch.len(), sd, |r| !dones[r]));
            let kept = tape.mul(terminal, keep)?;
            let fresh = tape.constant(reset_rows(&advanced.states, &dones));
            tape.add(kept, fresh)?
        } else {
            terminal
        };
        rec.state_values.push(batch.states.clone());
        rec.terminal_values.push(predicted);
        rec.terminal_states.push(terminal);
        rec.dones.push(dones);
        rec.states.push(next);
        s = next;
        batch = BatchState { states: tape.value(next).clone(), ..advanced };
    }
    let initial = tape.value(rec.states[0]).clone();
    Ok(rec.finish(initial, batch))
}

/// Which return the policy maximizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    /// `Σ_h d^h r_h`, no bootstrap.
    Bptt { discount: f64 },
    /// `Σ_h γ^h r_h + γ^H V(s_H)`.
    Shac { gamma: f64 },
    /// As `Shac` with rewards `r_h + α·H_π(s_h)` and an ensemble-min bootstrap.
    Sapo { gamma: f64, alpha: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub kind: LossKind,
    /// At a time-limit done, bootstrap from the pre-reset state's value
    /// instead of treating it as terminal.
    pub bootstrap_on_timeout: bool,
    /// Bootstrap from the critic's target copy when it has one.
    pub use_target: bool,
}

/// Scalar policy loss: the negative windowed return averaged over actors.
/// Discounting restarts after a done flag.
pub fn policy_loss(tape: &mut Tape, window: &TrajectoryWindow, settings: &LossSettings, critic: Option<&Critic>) -> Result<NodeId> {
    let n = window.initial_states.outer_len();
    let horizon = window.horizon();
    let (gamma, alpha, bootstrap) = match settings.kind {
        LossKind::Bptt { discount } => (discount, 0.0, false),
        LossKind::Shac { gamma } => (gamma, 0.0, true),
        LossKind::Sapo { gamma, alpha } => (gamma, alpha, true),
    };
    if bootstrap && critic.is_none() {
        return Err(Error::InvalidArgument("a bootstrapped loss needs a critic".into()));
    }
    let mut disc = vec![1.0; n];
    let mut total: Option<NodeId> = None;
    let mut accumulate = |tape: &mut Tape, x: NodeId, w: &[f64]| -> Result<()> {
        let w = tape.constant(Tensor::from_parts(vec![n], w.to_vec()));
        let weighted = tape.mul(x, w)?;
        let s = tape.sum(weighted)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
        Ok(())
    };
    for h in 0..horizon {
        let mut r = window.rewards[h];
        if let LossKind::Sapo { .. } = settings.kind {
            let ent = window
                .entropies
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("entropy-regularized loss needs window entropies".into()))?;
            let bonus = tape.scale(ent[h], alpha)?;
            r = tape.add(r, bonus)?;
        }
        accumulate(tape, r, &disc)?;
        let dones = &window.dones[h];
        if bootstrap {
            let last = h + 1 == horizon;
            let w: Vec<f64> = (0..n)
                .map(|i| {
                    let on = if dones[i] { settings.bootstrap_on_timeout } else { last };
                    if on {
                        disc[i] * gamma
                    } else {
                        0.0
                    }
                })
                .collect();
            if w.iter().any(|&x| x != 0.0) {
                let v = critic.unwrap().value_on_tape(tape, window.terminal_states[h], settings.use_target)?;
                accumulate(tape, v, &w)?;
            }
        }
        for i in 0..n {
            disc[i] = if dones[i] { 1.0 } else { disc[i] * gamma };
        }
    }
    let total = total.expect("window has at least one step");
    tape.scale(total, -1.0 / n as f64)
}

/// One row of training metrics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub env_steps: u64,
    pub episodic_return: Option<f64>,
    pub policy_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub model_nll: Option<f64>,
    pub grad_norm: Option<f64>,
    pub cos_dmo_true: Option<f64>,
    pub cos_fwd_true: Option<f64>,
    pub alpha: Option<f64>,
    pub wallclock_s: Option<f64>,
}

impl EpochMetrics {
    fn values(&self) -> [Option<f64>; 9] {
        [
            self.episodic_return,
            self.policy_loss,
            self.critic_loss,
            self.model_nll,
            self.grad_norm,
            self.cos_dmo_true,
            self.cos_fwd_true,
            self.alpha,
            self.wallclock_s,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().flatten().all(|v| v.is_finite())
    }
}

/// Flattened policy gradients of one window under the three pathways.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientTriplet {
    pub true_grad: Vec<f64>,
    pub dmo: Vec<f64>,
    pub forward: Vec<f64>,
}

/// Undiscounted returns of finished episodes, tracked per actor row.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTracker {
    pub running: Vec<f64>,
    pub last_mean: Option<f64>,
}

impl EpisodeTracker {
    pub fn new(n: usize) -> Self {
        Self { running: vec![0.0; n], last_mean: None }
    }

    pub fn record(&mut self, rewards: &Tensor, dones: &[Vec<bool>]) {
        let n = self.running.len();
        let mut finished = Vec::new();
        for (h, step) in dones.iter().enumerate() {
            for i in 0..n {
                self.running[i] += rewards.data()[h * n + i];
                if step[i] {
                    finished.push(self.running[i]);
                    self.running[i] = 0.0;
                }
            }
        }
        if !finished.is_empty() {
            self.last_mean = Some(finished.iter().sum::<f64>() / finished.len() as f64);
        }
    }
}

/// Every learned component of one run plus its counters.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub env: Env,
    pub actor: Actor,
    pub critic: Option<Critic>,
    pub model: Option<DynamicsModel>,
    pub buffer: ReplayBuffer,
    pub temperature: Option<EntropyTemperature>,
    pub batch: BatchState,
    pub epoch: u64,
    pub env_steps: u64,
    pub episodes: EpisodeTracker,
    /// Buffer size at the last refit of the model's whitening statistics.
    pub norm_fit_len: usize,
}

impl Trainer {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let cfg = config.clone();
        let variant = cfg.algo;
        let env = Env::new(cfg.env).with_max_episode_steps(cfg.max_episode_steps).with_parallel(cfg.parallel_actors);
        let mode = if variant.is_sapo() { StdMode::StateDependent } else { StdMode::Global };
        let actor = Actor::new(
            &env,
            &cfg.actor_hidden,
            cfg.actor_activation,
            mode,
            cfg.actor_init_log_std,
            &mut stream(seed, StreamRole::Init, &[0]),
        );
        let critic = if variant.uses_critic() {
            let tau = (!variant.is_sapo()).then_some(cfg.critic_tau);
            Some(Critic::new(
                &env,
                &cfg.critic_hidden,
                cfg.critic_activation,
                cfg.critic_ensemble,
                tau,
                &mut stream(seed, StreamRole::Init, &[1]),
            )?)
        } else {
            None
        };
        let model = variant.uses_model().then(|| {
            DynamicsModel::new(&env, &cfg.model_hidden, cfg.model_activation, &mut stream(seed, StreamRole::Init, &[2]))
        });
        let temperature = if variant.is_sapo() {
            Some(EntropyTemperature::new(cfg.alpha_init, cfg.target_entropy(env.spec().action_dim), cfg.entropy_lr)?)
        } else {
            None
        };
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            batch: env.reset_batch(seed, cfg.num_actors),
            episodes: EpisodeTracker::new(cfg.num_actors),
            config: cfg,
            seed,
            env,
            actor,
            critic,
            model,
            temperature,
            epoch: 0,
            env_steps: 0,
            norm_fit_len: 0,
        })
    }

    pub fn variant(&self) -> AlgoVariant {
        self.config.algo
    }

    /// Multiplier on every learning rate at the current epoch.
    pub fn lr_scale(&self) -> f64 {
        match self.config.lr_schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Linear => {
                let total = self.config.total_epochs().max(1) as f64;
                (1.0 - self.epoch as f64 / total).max(0.0)
            }
        }
    }

    pub fn loss_settings(&self) -> LossSettings {
        let cfg = &self.config;
        let kind = match self.variant() {
            AlgoVariant::DmoBptt | AlgoVariant::BpttTrue => LossKind::Bptt { discount: cfg.bptt_discount },
            AlgoVariant::DmoSapo => {
                LossKind::Sapo { gamma: cfg.gamma, alpha: self.temperature.as_ref().map_or(0.0, |t| t.alpha) }
            }
            _ => LossKind::Shac { gamma: cfg.gamma },
        };
        LossSettings { kind, bootstrap_on_timeout: cfg.bootstrap_on_timeout, use_target: true }
    }

    pub fn noise(&self) -> Vec<Tensor> {
        window_noise(self.seed, self.epoch, self.config.horizon, self.config.num_actors, self.env.spec().action_dim)
    }

    fn model_or_err(&self) -> Result<&DynamicsModel> {
        self.model.as_ref().ok_or_else(|| Error::InvalidArgument(format!("{} has no dynamics model", self.variant().name())))
    }

    fn build_window(&self, tape: &mut Tape, params: &[NodeId], pathway: Pathway, noise: &[Tensor]) -> Result<TrajectoryWindow> {
        let sapo = self.variant().is_sapo();
        match pathway {
            Pathway::Decoupled => {
                rollout_decoupled(tape, &self.env, self.model_or_err()?, &self.actor, params, &self.batch, noise, sapo)
            }
            Pathway::True => rollout_true(tape, &self.env, &self.actor, params, &self.batch, noise, sapo),
            Pathway::ModelForward => {
                rollout_model_forward(tape, &self.env, self.model_or_err()?, &self.actor, params, &self.batch, noise, sapo)
            }
        }
    }

    /// Loss value and flattened raw actor gradient along `pathway` for the
    /// current batch and this epoch's noise.
    pub fn policy_gradient(&self, pathway: Pathway) -> Result<(f64, Vec<f64>)> {
        let noise = self.noise();
        let mut tape = Tape::new();
        let params = self.actor.bind(&mut tape, true);
        let window = self.build_window(&mut tape, &params, pathway, &noise)?;
        let loss = policy_loss(&mut tape, &window, &self.loss_settings(), self.critic.as_ref())?;
        let grads = tape.backward(loss)?;
        let g = collect_grads(&grads, &params, &self.actor.params());
        Ok((tape.value(loss).item(), flatten(&g)))
    }

    /// Gradients of the same window (initial states and noise) through the
    /// simulator, the decoupled graph and the model-forward graph.
    pub fn gradient_triplet(&self) -> Result<GradientTriplet> {
        Ok(GradientTriplet {
            true_grad: self.policy_gradient(Pathway::True)?.1,
            dmo: self.policy_gradient(Pathway::Decoupled)?.1,
            forward: self.policy_gradient(Pathway::ModelForward)?.1,
        })
    }

    fn model_phase(&mut self) -> Result<()> {
        let cfg = &self.config;
        let (seed, epoch, bs) = (self.seed, self.epoch, cfg.model_batch_size);
        let lr = cfg.model_lr * self.lr_scale();
        let steps = cfg.model_minibatches;
        if let Some(model) = &mut self.model {
            if self.buffer.is_empty() {
                return Ok(());
            }
            // refit whenever the buffer has grown by a quarter
            if self.buffer.len() * 4 >= self.norm_fit_len * 5 && self.buffer.len() > self.norm_fit_len {
                model.refresh_normalization(&self.buffer);
                self.norm_fit_len = self.buffer.len();
            }
            model.model_update(&self.buffer, bs, steps, lr, None, |k, b| {
                b.sample_indices(&mut stream(seed, StreamRole::ModelBatch, &[epoch, k as u64]), bs)
            })?;
        }
        Ok(())
    }

    fn critic_phase(&mut self, window: &TrajectoryWindow) -> Result<Option<f64>> {
        let cfg = self.config.clone();
        let alpha = self.temperature.as_ref().map(|t| t.alpha);
        let lr = cfg.critic_lr * self.lr_scale();
        let (seed, epoch) = (self.seed, self.epoch);
        let Some(critic) = &mut self.critic else {
            return Ok(None);
        };
        let horizon = window.horizon();
        let n = window.initial_states.outer_len();
        let sd = self.env.spec().state_dim;
        let stack = |ts: &[Tensor]| Tensor::from_parts(vec![ts.len() * n, sd], ts.iter().flat_map(|t| t.data().to_vec()).collect());
        let states = stack(&window.state_values);
        let mut value_rows = vec![window.state_values[0].clone()];
        value_rows.extend(window.terminal_values.iter().cloned());
        let values = critic.values(&stack(&value_rows), true)?;
        let values = Tensor::from_parts(vec![horizon + 1, n], values);
        let mut rewards = window.raw_rewards.clone();
        if let Some(alpha) = alpha {
            let ent = self.actor.policy_entropy(&states)?;
            rewards.data_mut().iter_mut().zip(&ent).for_each(|(r, e)| *r += alpha * e);
        }
        let handling = if cfg.bootstrap_on_timeout { DoneHandling::BootstrapTimeout } else { DoneHandling::Terminate };
        let targets = td_lambda_targets(&rewards, &values, &window.dones, cfg.gamma, cfg.lambda, handling)?;
        let loss = critic.critic_update(
            &states,
            targets.targets.data(),
            lr,
            cfg.critic_mini_epochs,
            cfg.critic_minibatches,
            Some(cfg.grad_clip),
            &mut stream(seed, StreamRole::CriticBatch, &[epoch]),
        )?;
        Ok(Some(loss))
    }

    /// One iteration: model fit, rollout, actor step, critic fit and (for the
    /// entropy-regularized variant) temperature step.
    pub fn train_epoch(&mut self) -> Result<EpochMetrics> {
        self.train_epoch_with(false)
    }

    /// As [`Trainer::train_epoch`], optionally also measuring how well the
    /// decoupled and model-forward gradients align with the true one.
    pub fn train_epoch_with(&mut self, report_cosines: bool) -> Result<EpochMetrics> {
        let started = Instant::now();
        let variant = self.variant();
        let (cos_dmo, cos_fwd) = if report_cosines {
            let t = self.gradient_triplet()?;
            (
                Some(crate::diagnostics::cosine_similarity(&t.dmo, &t.true_grad)?.value),
                Some(crate::diagnostics::cosine_similarity(&t.forward, &t.true_grad)?.value),
            )
        } else {
            (None, None)
        };

        self.model_phase()?;

        let noise = self.noise();
        let mut tape = Tape::new();
        let params = self.actor.bind(&mut tape, true);
        let window = self.build_window(&mut tape, &params, variant.pathway(), &noise)?;
        // model-forward collects its real data with the same policy and noise
        let real = if variant.pathway() == Pathway::ModelForward {
            let mut scratch = Tape::new();
            let p = self.actor.bind(&mut scratch, false);
            rollout_true(&mut scratch, &self.env, &self.actor, &p, &self.batch, &noise, variant.is_sapo())?
        } else {
            window.clone()
        };
        let loss = policy_loss(&mut tape, &window, &self.loss_settings(), self.critic.as_ref())?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Divergence(format!("policy loss is {loss_value} at epoch {}", self.epoch)));
        }
        let grads = tape.backward(loss)?;
        let mut g = collect_grads(&grads, &params, &self.actor.params());
        let grad_norm = clip_grad_norm(&mut g, self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Divergence(format!("policy gradient norm is {grad_norm} at epoch {}", self.epoch)));
        }
        let lr = self.config.actor_lr * self.lr_scale();
        self.actor.apply_gradients(&g, lr);

        let model_nll = match &self.model {
            Some(m) if !real.transitions.is_empty() => Some(m.evaluate_nll(&real.transitions)?),
            _ => None,
        };
        if variant.uses_model() {
            for t in &real.transitions {
                self.buffer.push(t.clone());
            }
        }

        let critic_loss = self.critic_phase(&real)?;

        if self.temperature.is_some() {
            let ent = self.actor_entropy_mean(&real)?;
            if let Some(temp) = &mut self.temperature {
                temp.update(ent);
            }
        }

        self.episodes.record(&real.raw_rewards, &real.dones);
        self.batch = real.final_batch.clone();
        self.epoch += 1;
        self.env_steps += self.config.steps_per_epoch();

        let metrics = EpochMetrics {
            epoch: self.epoch,
            env_steps: self.env_steps,
            episodic_return: self.episodes.last_mean,
            policy_loss: Some(loss_value),
            critic_loss,
            model_nll,
            grad_norm: Some(grad_norm),
            cos_dmo_true: cos_dmo,
            cos_fwd_true: cos_fwd,
            alpha: self.temperature.as_ref().map(|t| t.alpha),
            wallclock_s: self.config.log_wallclock.then(|| started.elapsed().as_secs_f64()),
        };
        if !metrics.all_finite() {
            return Err(Error::Divergence(format!("non-finite metric at epoch {}: {metrics:?}", self.epoch)));
        }
        Ok(metrics)
    }

    fn actor_entropy_mean(&self, window: &TrajectoryWindow) -> Result<f64> {
        let n = window.initial_states.outer_len();
        let sd = self.env.spec().state_dim;
        let states = Tensor::from_parts(
            vec![window.state_values.len() * n, sd],
            window.state_values.iter().flat_map(|t| t.data().to_vec()).collect(),
        );
        let e = self.actor.policy_entropy(&states)?;
        Ok(e.iter().sum::<f64>() / e.len() as f64)
    }

    /// Full run state: parameters, optimizer moments, replay contents,
    /// environment batch and counters.
    pub fn save(&self) -> Archive {
        let mut a = Archive::new();
        a.put_text("config", self.config.to_text());
        a.put_u64s("counters", vec![self.seed, self.epoch, self.env_steps, self.norm_fit_len as u64]);
        self.actor.save(&mut a, "actor");
        if let Some(c) = &self.critic {
            c.save(&mut a, "critic");
        }
        if let Some(m) = &self.model {
            m.save(&mut a, "model");
        }
        if self.variant().uses_model() {
            self.buffer.save(&mut a, "replay");
        }
        if let Some(t) = &self.temperature {
            a.put_tensor("temperature", &Tensor::vector(vec![t.alpha, t.target, t.lr]));
        }
        a.put_tensor("batch.states", &self.batch.states);
        a.put_u64s("batch.steps", self.batch.steps_elapsed.iter().map(|&s| s as u64).collect());
        a.put_u64s("batch.episodes", self.batch.episodes.clone());
        a.put_tensor("episodes.running", &Tensor::vector(self.episodes.running.clone()));
        if let Some(m) = self.episodes.last_mean {
            a.put_tensor("episodes.last_mean", &Tensor::scalar(m));
        }
        a
    }

    pub fn load(archive: &Archive) -> Result<Self> {
        let config = ExperimentConfig::parse_str(archive.text("config")?)?;
        let counters = archive.u64s("counters")?;
        let [seed, epoch, env_steps, norm_fit_len] = counters else {
            return Err(Error::Checkpoint("bad counters".into()));
        };
        let mut t = Trainer::new(&config, *seed)?;
        t.epoch = *epoch;
        t.env_steps = *env_steps;
        t.norm_fit_len = *norm_fit_len as usize;
        t.actor = Actor::load(archive, "actor", &t.env)?;
        if t.critic.is_some() {
            t.critic = Some(Critic::load(archive, "critic", &t.env)?);
        }
        if t.model.is_some() {
            t.model = Some(DynamicsModel::load(archive, "model", &t.env)?);
            t.buffer = ReplayBuffer::load(archive, "replay")?;
        }
        if let Some(temp) = &mut t.temperature {
            let v = archive.tensor("temperature")?.data();
            (temp.alpha, temp.target, temp.lr) = (v[0], v[1], v[2]);
        }
        let states = archive.tensor("batch.states")?.clone();
        if states.shape() != t.batch.states.shape() {
            return Err(Error::Checkpoint("batch shape does not match config".into()));
        }
        t.batch.states = states;
        t.batch.steps_elapsed = archive.u64s("batch.steps")?.iter().map(|&s| s as usize).collect();
        t.batch.episodes = archive.u64s("batch.episodes")?.to_vec();
        t.episodes.running = archive.tensor("episodes.running")?.data().to_vec();
        t.episodes.last_mean =
            if archive.contains("episodes.last_mean") { Some(archive.tensor("episodes.last_mean")?.item()) } else { None };
        Ok(t)
    }
}
