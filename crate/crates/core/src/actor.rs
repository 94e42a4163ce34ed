//! Tanh-squashed Gaussian policy and the entropy temperature.

use rand::Rng;

use crate::checkpoint::{load_mlp, save_mlp, Archive};
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::nn::{bind_params, Activation, Adam, Mlp};
use crate::tape::{NodeId, Tape, HALF_LOG_2PI, LOG_2PI};
use crate::tensor::Tensor;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;
const ALPHA_FLOOR: f64 = 1e-6;

/// How the policy's standard deviation is parameterized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StdMode {
    /// One learnable log-std per action dimension, shared by all states.
    Global,
    /// A second network head, as used by the entropy-regularized variant.
    StateDependent,
}

/// Nodes produced by one policy evaluation over `n` rows.
#[derive(Clone, Copy, Debug)]
pub struct ActionNodes {
    /// Squashed action, `[n, action_dim]`.
    pub action: NodeId,
    /// Log-density of the squashed action, `[n]`.
    pub log_prob: NodeId,
    /// Pre-squash mean, `[n, action_dim]`.
    pub mean: NodeId,
    /// Clamped pre-squash log-std, `[n, action_dim]`.
    pub log_std: NodeId,
}

#[derive(Clone, Debug)]
pub struct Actor {
    env: Env,
    pub net: Mlp,
    /// Present in [`StdMode::Global`].
    pub log_std: Option<Tensor>,
    pub mode: StdMode,
    pub optimizer: Adam,
}

impl Actor {
    pub fn new(
        env: &Env,
        hidden: &[usize],
        activation: Activation,
        mode: StdMode,
        init_log_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let spec = env.spec();
        let ad = spec.action_dim;
        let mut sizes = vec![spec.obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(if mode == StdMode::StateDependent { 2 * ad } else { ad });
        let mut net = Mlp::new(&sizes, activation, false, rng);
        let log_std = match mode {
            StdMode::Global => Some(Tensor::full(&[ad], init_log_std)),
            StdMode::StateDependent => {
                let last = net.biases.len() - 1;
                net.biases[last].data_mut()[ad..].iter_mut().for_each(|b| *b = init_log_std);
                None
            }
        };
        Self::assemble(env, net, log_std, mode)
    }

    fn assemble(env: &Env, net: Mlp, log_std: Option<Tensor>, mode: StdMode) -> Self {
        let mut actor = Self { env: env.clone(), net, log_std, mode, optimizer: Adam::new(&[], 0.7, 0.95) };
        actor.optimizer = Adam::new(&actor.params(), 0.7, 0.95);
        actor
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn action_dim(&self) -> usize {
        self.env.spec().action_dim
    }

    /// Network weights and biases, then the global log-std if any.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.net.params();
        p.extend(self.log_std.iter());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.net.params_mut();
        p.extend(self.log_std.iter_mut());
        p
    }

    /// One Adam step on all policy parameters.
    pub fn apply_gradients(&mut self, grads: &[Tensor], lr: f64) {
        let mut p = self.net.params_mut();
        p.extend(self.log_std.iter_mut());
        self.optimizer.step(&mut p, grads, lr);
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<NodeId> {
        bind_params(tape, &self.params(), trainable)
    }

    fn rows_of(&self, tape: &mut Tape, values: &[f64], n: usize) -> NodeId {
        let data = (0..n).flat_map(|_| values.iter().copied()).collect();
        tape.constant(Tensor::from_parts(vec![n, values.len()], data))
    }

    /// Pre-squash mean and clamped log-std for `state: [n, state_dim]`.
    pub fn distribution_on_tape(&self, tape: &mut Tape, params: &[NodeId], state: NodeId) -> Result<(NodeId, NodeId)> {
        let ad = self.action_dim();
        let obs = self.env.observe_on_tape(tape, state)?;
        let n = tape.value(obs).outer_len();
        let net_params = &params[..2 * self.net.weights.len()];
        let out = self.net.forward(tape, net_params, obs)?;
        let (mean, raw) = match self.mode {
            StdMode::Global => (out, tape.broadcast_rows(params[params.len() - 1], n)?),
            StdMode::StateDependent => (tape.slice(out, 0, ad)?, tape.slice(out, ad, 2 * ad)?),
        };
        Ok((mean, tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX)?))
    }

    fn squash(&self, tape: &mut Tape, u: NodeId) -> Result<NodeId> {
        let spec = self.env.spec();
        let n = tape.value(u).outer_len();
        let half: Vec<f64> = spec.action_low.iter().zip(&spec.action_high).map(|(l, h)| 0.5 * (h - l)).collect();
        let mid: Vec<f64> = spec.action_low.iter().zip(&spec.action_high).map(|(l, h)| 0.5 * (h + l)).collect();
        let t = tape.tanh(u)?;
        let half = self.rows_of(tape, &half, n);
        let scaled = tape.mul(t, half)?;
        let mid = tape.constant(Tensor::vector(mid));
        tape.add_bias(scaled, mid)
    }

    /// Samples `action = mid + half * tanh(mean + std * noise)` for a batch of
    /// states `[n, state_dim]` with caller-supplied standard normal noise.
    pub fn act_on_tape(&self, tape: &mut Tape, params: &[NodeId], state: NodeId, noise: &Tensor) -> Result<ActionNodes> {
        let (mean, log_std) = self.distribution_on_tape(tape, params, state)?;
        let u = tape.reparam_sample(mean, log_std, noise.clone())?;
        let action = self.squash(tape, u)?;

        // log N(u; mean, std) with z = noise
        let ad = self.action_dim() as f64;
        let n = noise.outer_len();
        let quad: Vec<f64> = (0..n)
            .map(|r| 0.5 * noise.row(r).iter().map(|z| z * z).sum::<f64>() + ad * HALF_LOG_2PI)
            .collect();
        let ls_sum = tape.sum_last(log_std)?;
        let quad = tape.constant(Tensor::from_parts(vec![n], quad));
        let gauss = tape.add(ls_sum, quad)?;
        let gauss = tape.neg(gauss)?;

        // log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))
        let m2u = tape.scale(u, -2.0)?;
        let sp = tape.softplus(m2u)?;
        let u_plus = tape.add(u, sp)?;
        let inner = tape.offset(u_plus, -std::f64::consts::LN_2)?;
        let log_det = tape.scale(inner, -2.0)?;
        let log_det = tape.sum_last(log_det)?;
        let spec = self.env.spec();
        let log_half: f64 = spec.action_low.iter().zip(&spec.action_high).map(|(l, h)| (0.5 * (h - l)).ln()).sum();
        let corrected = tape.sub(gauss, log_det)?;
        let log_prob = tape.offset(corrected, -log_half)?;
        Ok(ActionNodes { action, log_prob, mean, log_std })
    }

    /// Analytic pre-squash entropy per row, `[n]`; only meaningful for the
    /// state-dependent parameterization.
    pub fn policy_entropy_on_tape(&self, tape: &mut Tape, params: &[NodeId], state: NodeId) -> Result<NodeId> {
        if self.mode != StdMode::StateDependent {
            return Err(Error::InvalidArgument("policy entropy requires a state-dependent std".into()));
        }
        let (_, log_std) = self.distribution_on_tape(tape, params, state)?;
        let sum = tape.sum_last(log_std)?;
        tape.offset(sum, entropy_constant(self.action_dim()))
    }

    /// Entropy of the policy at each of `states: [n, state_dim]`.
    pub fn policy_entropy(&self, states: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let s = tape.constant(states.clone());
        let h = self.policy_entropy_on_tape(&mut tape, &params, s)?;
        Ok(tape.value(h).data().to_vec())
    }

    /// Deterministic action `mid + half * tanh(mean)` for `[n, state_dim]`.
    pub fn mean_action(&self, states: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let s = tape.constant(states.clone());
        let (mean, _) = self.distribution_on_tape(&mut tape, &params, s)?;
        let a = self.squash(&mut tape, mean)?;
        Ok(tape.value(a).clone())
    }

    pub fn save(&self, archive: &mut Archive, prefix: &str) {
        save_mlp(archive, &format!("{prefix}.net"), &self.net);
        archive.put_text(format!("{prefix}.mode"), match self.mode {
            StdMode::Global => "global",
            StdMode::StateDependent => "state_dependent",
        });
        if let Some(ls) = &self.log_std {
            archive.put_tensor(format!("{prefix}.log_std"), ls);
        }
        archive.put_u64s(format!("{prefix}.opt_step"), vec![self.optimizer.step]);
        for (i, t) in self.optimizer.state_tensors().iter().enumerate() {
            archive.put_tensor(format!("{prefix}.opt{i}"), t);
        }
    }

    pub fn load(archive: &Archive, prefix: &str, env: &Env) -> Result<Self> {
        let net = load_mlp(archive, &format!("{prefix}.net"))?;
        let mode = match archive.text(&format!("{prefix}.mode"))? {
            "global" => StdMode::Global,
            "state_dependent" => StdMode::StateDependent,
            other => return Err(Error::Checkpoint(format!("unknown actor mode `{other}`"))),
        };
        let spec = env.spec();
        let out = if mode == StdMode::Global { spec.action_dim } else { 2 * spec.action_dim };
        if net.input_dim() != spec.obs_dim || net.output_dim() != out {
            return Err(Error::Checkpoint(format!("actor dimensions do not match {}", env.kind().name())));
        }
        let log_std = match mode {
            StdMode::Global => Some(archive.tensor(&format!("{prefix}.log_std"))?.clone()),
            StdMode::StateDependent => None,
        };
        let mut actor = Self::assemble(env, net, log_std, mode);
        let n = 2 * actor.params().len();
        let tensors = (0..n).map(|i| archive.tensor(&format!("{prefix}.opt{i}")).cloned()).collect::<Result<Vec<_>>>()?;
        actor.optimizer.load_state(archive.u64(&format!("{prefix}.opt_step"))?, tensors)?;
        Ok(actor)
    }
}

/// `(d / 2)(1 + ln 2π)`, the entropy of a `d`-dimensional unit Gaussian.
pub fn entropy_constant(d: usize) -> f64 {
    0.5 * d as f64 * (1.0 + LOG_2PI)
}

/// Entropy temperature adapted toward a target entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyTemperature {
    pub alpha: f64,
    pub target: f64,
    pub lr: f64,
}

impl EntropyTemperature {
    pub fn new(alpha: f64, target: f64, lr: f64) -> Result<Self> {
        if alpha.is_nan() || alpha <= 0.0 {
            return Err(Error::InvalidArgument(format!("temperature {alpha} must be positive")));
        }
        Ok(Self { alpha, target, lr })
    }

    /// `α ← α − lr·α·(H − H*)`, kept above a small positive floor.
    pub fn update(&mut self, batch_entropy: f64) {
        let next = self.alpha - self.lr * self.alpha * (batch_entropy - self.target);
        self.alpha = if next > ALPHA_FLOOR { next } else { ALPHA_FLOOR };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvKind;
    use crate::rng::{standard_normal, stream, uniform, StreamRole};
    use proptest::prelude::*;

    fn actor(kind: EnvKind, mode: StdMode, seed: u64) -> Actor {
        Actor::new(&Env::new(kind), &[16, 8], Activation::Elu, mode, -1.0, &mut stream(seed, StreamRole::Init, &[]))
    }

    fn run(a: &Actor, s: &Tensor, noise: &Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let p = a.bind(&mut tape, false);
        let sn = tape.constant(s.clone());
        let out = a.act_on_tape(&mut tape, &p, sn, noise).unwrap();
        (tape.value(out.action).clone(), tape.value(out.log_prob).clone())
    }

    #[test]
    fn zero_noise_gives_squashed_mean() {
        let a = actor(EnvKind::Pendulum, StdMode::StateDependent, 0);
        let s = Tensor::matrix(2, 2, vec![0.1, 0.2, -1.0, 3.0]).unwrap();
        let (act, _) = run(&a, &s, &Tensor::zeros(&[2, 1]));
        assert_eq!(act, a.mean_action(&s).unwrap());
    }

    #[test]
    fn unit_log_prob_example() {
        // one-dimensional policy with zero mean, unit std and unit bounds
        let env = Env::new(EnvKind::DoubleIntegrator);
        let mut a = Actor::new(&env, &[4], Activation::Elu, StdMode::Global, 0.0, &mut stream(0, StreamRole::Init, &[]));
        a.net.weights[1].data_mut().iter_mut().for_each(|w| *w = 0.0);
        a.net.biases[1].data_mut().iter_mut().for_each(|b| *b = 0.0);
        let (act, lp) = run(&a, &Tensor::matrix(1, 2, vec![0.3, 0.1]).unwrap(), &Tensor::zeros(&[1, 1]));
        assert_eq!(act.data(), &[0.0]);
        let half = (env.spec().action_high[0] - env.spec().action_low[0]) / 2.0;
        let unit_scale = lp.data()[0] + half.ln();
        assert!((unit_scale + 0.918_938_533_204_672_8).abs() < 1e-12, "{unit_scale}");
    }

    #[test]
    fn log_prob_matches_change_of_variables() {
        let a = actor(EnvKind::Cartpole, StdMode::StateDependent, 2);
        let env = a.env().clone();
        let s = Tensor::matrix(1, 4, vec![0.1, 2.0, -0.3, 0.4]).unwrap();
        let noise = Tensor::matrix(1, 1, vec![0.7]).unwrap();
        let (act, lp) = run(&a, &s, &noise);
        let mut tape = Tape::new();
        let p = a.bind(&mut tape, false);
        let sn = tape.constant(s);
        let (m, ls) = a.distribution_on_tape(&mut tape, &p, sn).unwrap();
        let (m, ls) = (tape.value(m).item(), tape.value(ls).item());
        let u = m + ls.exp() * 0.7;
        let half = env.spec().action_high[0];
        let want = -ls - 0.5 * 0.49 - HALF_LOG_2PI - (1.0 - u.tanh().powi(2)).ln() - half.ln();
        assert!((lp.item() - want).abs() < 1e-10);
        assert!((act.item() - half * u.tanh()).abs() < 1e-12);
    }

    #[test]
    fn action_gradient_matches_finite_differences() {
        let a = actor(EnvKind::Pendulum, StdMode::Global, 4);
        let s = Tensor::matrix(3, 2, vec![0.5, -0.2, 2.5, 1.0, -1.0, 0.3]).unwrap();
        let noise = standard_normal(&mut stream(4, StreamRole::Test, &[]), &[3, 1]);
        let mut tape = Tape::new();
        let p = a.bind(&mut tape, true);
        let sn = tape.constant(s.clone());
        let out = a.act_on_tape(&mut tape, &p, sn, &noise).unwrap();
        let root = tape.sum(out.action).unwrap();
        let grads = tape.backward(root).unwrap();
        let eps = 1e-5;
        for (k, id) in p.iter().enumerate() {
            let g = grads.get_or_zeros(*id, tape.shape(*id));
            for j in 0..g.numel() {
                let mut hi = a.clone();
                let mut lo = a.clone();
                hi.params_mut()[k].data_mut()[j] += eps;
                lo.params_mut()[k].data_mut()[j] -= eps;
                let fd = (run(&hi, &s, &noise).0.sum() - run(&lo, &s, &noise).0.sum()) / (2.0 * eps);
                let err = (fd - g.data()[j]).abs() / fd.abs().max(1e-6);
                assert!(err < 1e-5, "param {k}[{j}]: fd {fd} vs {}", g.data()[j]);
            }
        }
    }

    #[test]
    fn entropy_closed_forms() {
        assert!((entropy_constant(1) - 1.418_938_533_204_672_7).abs() < 1e-12);
        assert!((entropy_constant(2) - 2.837_877_066_409_345_5).abs() < 1e-12);
        let mut a = actor(EnvKind::Pendulum, StdMode::StateDependent, 1);
        a.net.weights[2].data_mut().iter_mut().for_each(|w| *w = 0.0);
        let s = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        a.net.biases[2].data_mut()[1] = 0.0;
        assert!((a.policy_entropy(&s).unwrap()[0] - 1.418_938_533_204_672_7).abs() < 1e-10);
        a.net.biases[2].data_mut()[1] = 2f64.ln();
        assert!((a.policy_entropy(&s).unwrap()[0] - 1.418_938_533_204_672_7 - 2f64.ln()).abs() < 1e-10);
        let global = actor(EnvKind::Pendulum, StdMode::Global, 1);
        assert!(global.policy_entropy(&s).is_err());
    }

    #[test]
    fn temperature_rule() {
        let mut t = EntropyTemperature::new(0.7, -0.5, 5e-3).unwrap();
        t.update(-0.5);
        assert_eq!(t.alpha, 0.7);
        t.update(1.0);
        assert!(t.alpha < 0.7);
        t.update(1e6);
        assert_eq!(t.alpha, 1e-6);
        assert!(EntropyTemperature::new(0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn round_trip() {
        for mode in [StdMode::Global, StdMode::StateDependent] {
            let a = actor(EnvKind::Cartpole, mode, 9);
            let mut ar = Archive::new();
            a.save(&mut ar, "actor");
            let b = Actor::load(&Archive::from_bytes(&ar.to_bytes()).unwrap(), "actor", a.env()).unwrap();
            assert_eq!(a.params(), b.params());
            assert_eq!(a.optimizer, b.optimizer);
        }
    }

    proptest! {
        #[test]
        fn actions_stay_in_bounds(seed in 0u64..1000, scale in 0.0f64..50.0, mode in any::<bool>()) {
            let mode = if mode { StdMode::StateDependent } else { StdMode::Global };
            let mut a = actor(EnvKind::Cartpole, mode, seed);
            let mut rng = stream(seed, StreamRole::Test, &[]);
            for p in a.params_mut() {
                p.data_mut().iter_mut().for_each(|v| *v = uniform(&mut rng, -scale, scale));
            }
            let s = Tensor::new(vec![4, 4], (0..16).map(|_| uniform(&mut rng, -10.0, 10.0)).collect()).unwrap();
            let noise = standard_normal(&mut rng, &[4, 1]).map(|z| z * 10.0);
            let (act, _) = run(&a, &s, &noise);
            let high = a.env().spec().action_high[0];
            prop_assert!(act.data().iter().all(|v| v.abs() <= high));
            let (again, _) = run(&a, &s, &noise);
            prop_assert_eq!(act, again);
        }
    }
}
