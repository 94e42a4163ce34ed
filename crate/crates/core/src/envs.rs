//! Smooth, contact-free control tasks with exact derivatives.
//!
//! Dynamics and rewards are written once, as tape expressions. The plain
//! [`Env::step`] evaluates the same expression on a scratch tape, so plain and
//! on-tape stepping agree bitwise and every Jacobian comes from the same code
//! that produces the forward values.
//!
//! All three tasks integrate with semi-implicit Euler (`v' = v + dt·acc`,
//! `x' = x + dt·v'`) and terminate on the time limit only.

use crate::error::{Error, Result};
use crate::rng::{self, StreamRole};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const DT: f64 = 0.05;
pub const GRAVITY: f64 = 9.81;

pub const DOUBLE_INTEGRATOR_MAX_ACCEL: f64 = 5.0;
pub const PENDULUM_MAX_TORQUE: f64 = 12.0;
pub const CARTPOLE_MAX_FORCE: f64 = 10.0;

const CART_MASS: f64 = 1.0;
const POLE_MASS: f64 = 0.1;
const POLE_HALF_LENGTH: f64 = 0.5;

/// Weight on `1 + cos θ` in the pendulum cost; matches `wrap(θ − π)²` to
/// second order around upright.
const PENDULUM_ANGLE_COST: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EnvKind {
    DoubleIntegrator,
    Pendulum,
    Cartpole,
}

impl EnvKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "double_integrator" => Some(EnvKind::DoubleIntegrator),
            "pendulum" | "pendulum_swingup" => Some(EnvKind::Pendulum),
            "cartpole" | "cartpole_swingup" => Some(EnvKind::Cartpole),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::DoubleIntegrator => "double_integrator",
            EnvKind::Pendulum => "pendulum",
            EnvKind::Cartpole => "cartpole",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    /// Width of the feature vector networks see (angles enter as cos/sin).
    pub obs_dim: usize,
    pub dt: f64,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_episode_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub values: Vec<f64>,
    pub steps_elapsed: usize,
}

/// `N` independent environment rows.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchState {
    /// `[N, state_dim]`.
    pub states: Tensor,
    pub steps_elapsed: Vec<usize>,
    /// Episode counter per row; keys the row's reset stream.
    pub episodes: Vec<u64>,
    pub seed: u64,
}

impl BatchState {
    pub fn len(&self) -> usize {
        self.steps_elapsed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps_elapsed.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct BatchStep {
    /// Post-reset batch, ready for the next step.
    pub next: BatchState,
    /// `[N, state_dim]` next states before any auto-reset.
    pub terminal_states: Tensor,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Env {
    kind: EnvKind,
    spec: EnvSpec,
    parallel: bool,
}

fn col(tape: &mut Tape, x: NodeId, i: usize) -> Result<NodeId> {
    tape.slice(x, i, i + 1)
}

impl Env {
    pub fn new(kind: EnvKind) -> Self {
        let (state_dim, obs_dim, bound) = match kind {
            EnvKind::DoubleIntegrator => (2, 2, DOUBLE_INTEGRATOR_MAX_ACCEL),
            EnvKind::Pendulum => (2, 3, PENDULUM_MAX_TORQUE),
            EnvKind::Cartpole => (4, 5, CARTPOLE_MAX_FORCE),
        };
        let spec = EnvSpec {
            state_dim,
            action_dim: 1,
            obs_dim,
            dt: DT,
            action_low: vec![-bound],
            action_high: vec![bound],
            max_episode_steps: 200,
        };
        Self { kind, spec, parallel: false }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        EnvKind::parse(name)
            .map(Self::new)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown environment `{name}`")))
    }

    /// Overrides the episode time limit.
    pub fn with_max_episode_steps(mut self, steps: usize) -> Self {
        assert!(steps > 0);
        self.spec.max_episode_steps = steps;
        self
    }

    /// Steps batch rows on the rayon pool. Rows are independent, so results
    /// do not depend on this setting.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn check_io(&self, tape: &Tape, state: NodeId, action: NodeId) -> Result<()> {
        let (s, a) = (tape.shape(state), tape.shape(action));
        let ok = s.last() == Some(&self.spec.state_dim)
            && a.last() == Some(&self.spec.action_dim)
            && s[..s.len() - 1] == a[..a.len() - 1];
        if !ok {
            return Err(Error::shape("env_step", &[s, a]));
        }
        Ok(())
    }

    fn clip_action(&self, tape: &mut Tape, action: NodeId) -> Result<NodeId> {
        let (lo, hi) = (&self.spec.action_low, &self.spec.action_high);
        if lo.iter().all(|&l| l == lo[0]) && hi.iter().all(|&h| h == hi[0]) {
            return tape.clamp(action, lo[0], hi[0]);
        }
        let cols = (0..self.spec.action_dim)
            .map(|i| {
                let c = col(tape, action, i)?;
                tape.clamp(c, lo[i], hi[i])
            })
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&cols)
    }

    /// Records the next state. `state` is `[.., state_dim]`, `action` is
    /// `[.., action_dim]` with matching leading axes.
    pub fn dynamics_on_tape(&self, tape: &mut Tape, state: NodeId, action: NodeId) -> Result<NodeId> {
        self.check_io(tape, state, action)?;
        let a = self.clip_action(tape, action)?;
        let dt = self.spec.dt;
        match self.kind {
            EnvKind::DoubleIntegrator => {
                let x = col(tape, state, 0)?;
                let v = col(tape, state, 1)?;
                let dv = tape.scale(a, dt)?;
                let v1 = tape.add(v, dv)?;
                let dx = tape.scale(v1, dt)?;
                let x1 = tape.add(x, dx)?;
                tape.concat(&[x1, v1])
            }
            EnvKind::Pendulum => {
                // unit mass and length: acc = -(g/l) sin θ + a / (m l²)
                let th = col(tape, state, 0)?;
                let w = col(tape, state, 1)?;
                let sin = tape.sin(th)?;
                let grav = tape.scale(sin, -GRAVITY)?;
                let acc = tape.add(grav, a)?;
                let dw = tape.scale(acc, dt)?;
                let w1 = tape.add(w, dw)?;
                let dth = tape.scale(w1, dt)?;
                let th1 = tape.add(th, dth)?;
                tape.concat(&[th1, w1])
            }
            EnvKind::Cartpole => {
                // θ measured from upright
                let total = CART_MASS + POLE_MASS;
                let pml = POLE_MASS * POLE_HALF_LENGTH;
                let x = col(tape, state, 0)?;
                let th = col(tape, state, 1)?;
                let xd = col(tape, state, 2)?;
                let thd = col(tape, state, 3)?;
                let sin = tape.sin(th)?;
                let cos = tape.cos(th)?;
                let thd2 = tape.square(thd)?;
                let centrifugal = tape.mul(thd2, sin)?;
                let centrifugal = tape.scale(centrifugal, pml)?;
                let force = tape.add(a, centrifugal)?;
                let temp = tape.scale(force, 1.0 / total)?;
                let g_sin = tape.scale(sin, GRAVITY)?;
                let cos_temp = tape.mul(cos, temp)?;
                let num = tape.sub(g_sin, cos_temp)?;
                let cos2 = tape.square(cos)?;
                let den = tape.scale(cos2, -POLE_HALF_LENGTH * POLE_MASS / total)?;
                let den = tape.offset(den, POLE_HALF_LENGTH * 4.0 / 3.0)?;
                let th_acc = tape.div(num, den)?;
                let coupling = tape.mul(th_acc, cos)?;
                let coupling = tape.scale(coupling, pml / total)?;
                let x_acc = tape.sub(temp, coupling)?;
                let dxd = tape.scale(x_acc, dt)?;
                let xd1 = tape.add(xd, dxd)?;
                let dthd = tape.scale(th_acc, dt)?;
                let thd1 = tape.add(thd, dthd)?;
                let dx = tape.scale(xd1, dt)?;
                let x1 = tape.add(x, dx)?;
                let dth = tape.scale(thd1, dt)?;
                let th1 = tape.add(th, dth)?;
                tape.concat(&[x1, th1, xd1, thd1])
            }
        }
    }

    /// Records `r(s, a)`, shaped like the leading axes of `state` (`[1]` for
    /// a single state). Rewards contain no branches.
    pub fn reward_on_tape(&self, tape: &mut Tape, state: NodeId, action: NodeId) -> Result<NodeId> {
        self.check_io(tape, state, action)?;
        let a = self.clip_action(tape, action)?;
        let a2 = tape.square(a)?;
        let a2 = tape.sum_last(a2)?;
        let cost = match self.kind {
            EnvKind::DoubleIntegrator => {
                let s2 = tape.square(state)?;
                let x2 = col(tape, s2, 0)?;
                let v2 = col(tape, s2, 1)?;
                let v2 = tape.scale(v2, 0.1)?;
                let c = tape.add(x2, v2)?;
                tape.sum_last(c)?
            }
            EnvKind::Pendulum => {
                let th = col(tape, state, 0)?;
                let w = col(tape, state, 1)?;
                let cos = tape.cos(th)?;
                let up = tape.offset(cos, 1.0)?;
                let up = tape.scale(up, PENDULUM_ANGLE_COST)?;
                let w2 = tape.square(w)?;
                let w2 = tape.scale(w2, 0.1)?;
                let c = tape.add(up, w2)?;
                tape.sum_last(c)?
            }
            EnvKind::Cartpole => {
                let x = col(tape, state, 0)?;
                let th = col(tape, state, 1)?;
                let cos = tape.cos(th)?;
                let x2 = tape.square(x)?;
                let x2 = tape.scale(x2, 0.05)?;
                let c = tape.sub(x2, cos)?;
                tape.sum_last(c)?
            }
        };
        let a2 = tape.scale(a2, 0.001)?;
        let total = tape.add(cost, a2)?;
        tape.neg(total)
    }

    /// Both halves of a step: `(next state, reward)`.
    pub fn step_on_tape(&self, tape: &mut Tape, state: NodeId, action: NodeId) -> Result<(NodeId, NodeId)> {
        let next = self.dynamics_on_tape(tape, state, action)?;
        let reward = self.reward_on_tape(tape, state, action)?;
        Ok((next, reward))
    }

    /// Network features of a state: angles enter as `(cos, sin)`.
    pub fn observe_on_tape(&self, tape: &mut Tape, state: NodeId) -> Result<NodeId> {
        match self.kind {
            EnvKind::DoubleIntegrator => Ok(state),
            EnvKind::Pendulum => {
                let th = col(tape, state, 0)?;
                let w = col(tape, state, 1)?;
                let c = tape.cos(th)?;
                let s = tape.sin(th)?;
                tape.concat(&[c, s, w])
            }
            EnvKind::Cartpole => {
                let x = col(tape, state, 0)?;
                let th = col(tape, state, 1)?;
                let xd = col(tape, state, 2)?;
                let thd = col(tape, state, 3)?;
                let c = tape.cos(th)?;
                let s = tape.sin(th)?;
                tape.concat(&[x, c, s, xd, thd])
            }
        }
    }

    pub fn observe(&self, states: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let o = self.observe_on_tape(&mut tape, s).expect("state shape checked by caller");
        tape.value(o).clone()
    }

    fn check_finite(values: &[f64], what: &str) -> Result<()> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{what} contains {v}")));
        }
        Ok(())
    }

    /// Plain-valued transition for `[N, state_dim]` states.
    fn transition(&self, states: &Tensor, actions: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        Self::check_finite(states.data(), "state")?;
        Self::check_finite(actions.data(), "action")?;
        if self.parallel && states.shape().len() == 2 && states.outer_len() > 1 {
            use rayon::prelude::*;
            let rows = (0..states.outer_len())
                .into_par_iter()
                .map(|r| {
                    let s = Tensor::from_parts(vec![1, self.spec.state_dim], states.row(r).to_vec());
                    let a = Tensor::from_parts(vec![1, self.spec.action_dim], actions.row(r).to_vec());
                    self.transition_serial(&s, &a)
                })
                .collect::<Result<Vec<_>>>()?;
            let next = rows.iter().flat_map(|(t, _)| t.data().iter().copied()).collect();
            let rewards = rows.iter().map(|(_, r)| r[0]).collect();
            return Ok((Tensor::from_parts(states.shape().to_vec(), next), rewards));
        }
        self.transition_serial(states, actions)
    }

    fn transition_serial(&self, states: &Tensor, actions: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let a = tape.constant(actions.clone());
        let (next, reward) = self.step_on_tape(&mut tape, s, a)?;
        let next = tape.value(next).clone();
        Self::check_finite(next.data(), "next state")?;
        Ok((next, tape.value(reward).data().to_vec()))
    }

    pub fn step(&self, state: &EnvState, action: &[f64]) -> Result<(EnvState, f64, bool)> {
        if state.values.len() != self.spec.state_dim || action.len() != self.spec.action_dim {
            return Err(Error::shape("env_step", &[&[state.values.len()], &[action.len()]]));
        }
        let s = Tensor::vector(state.values.clone());
        let a = Tensor::vector(action.to_vec());
        let (next, reward) = self.transition(&s, &a)?;
        let steps = state.steps_elapsed + 1;
        let done = steps >= self.spec.max_episode_steps;
        Ok((EnvState { values: next.into_data(), steps_elapsed: steps }, reward[0], done))
    }

    /// Initial state drawn from the stream keyed by `seed`.
    pub fn reset(&self, seed: u64) -> EnvState {
        self.reset_row(seed, 0, 0)
    }

    /// Initial state for `row`'s `episode`-th episode.
    pub fn reset_row(&self, seed: u64, row: u64, episode: u64) -> EnvState {
        self.sample_initial(&mut rng::stream(seed, StreamRole::Reset, &[row, episode]))
    }

    /// Draws an initial state from the task's start distribution.
    pub fn sample_initial(&self, r: &mut impl rand::Rng) -> EnvState {
        let values = match self.kind {
            EnvKind::DoubleIntegrator => {
                vec![rng::uniform(r, -1.0, 1.0), rng::uniform(r, -1.0, 1.0)]
            }
            EnvKind::Pendulum => {
                // (-π, π]
                let th = std::f64::consts::PI - rng::uniform(r, 0.0, 2.0 * std::f64::consts::PI);
                vec![th, rng::uniform(r, -1.0, 1.0)]
            }
            EnvKind::Cartpole => vec![
                rng::uniform(r, -0.1, 0.1),
                std::f64::consts::PI + rng::uniform(r, -0.1, 0.1),
                rng::uniform(r, -0.1, 0.1),
                rng::uniform(r, -0.1, 0.1),
            ],
        };
        EnvState { values, steps_elapsed: 0 }
    }

    pub fn reset_batch(&self, seed: u64, n: usize) -> BatchState {
        assert!(n > 0, "batch must hold at least one row");
        let data = (0..n).flat_map(|row| self.reset_row(seed, row as u64, 0).values).collect();
        BatchState {
            states: Tensor::from_parts(vec![n, self.spec.state_dim], data),
            steps_elapsed: vec![0; n],
            episodes: vec![0; n],
            seed,
        }
    }

    /// Which rows finish their episode on the next step.
    pub fn dones_after_step(&self, batch: &BatchState) -> Vec<bool> {
        batch.steps_elapsed.iter().map(|&s| s + 1 >= self.spec.max_episode_steps).collect()
    }

    /// Moves `batch` to `next_states`, advancing the step counters and
    /// replacing rows that hit the time limit with their next reset state.
    pub fn advance_batch(&self, batch: &BatchState, next_states: &Tensor) -> (BatchState, Vec<bool>) {
        let dones = self.dones_after_step(batch);
        let mut next = batch.clone();
        next.states = next_states.clone();
        let sd = self.spec.state_dim;
        for (row, &done) in dones.iter().enumerate() {
            if done {
                next.episodes[row] += 1;
                next.steps_elapsed[row] = 0;
                let fresh = self.reset_row(batch.seed, row as u64, next.episodes[row]);
                next.states.data_mut()[row * sd..(row + 1) * sd].copy_from_slice(&fresh.values);
            } else {
                next.steps_elapsed[row] += 1;
            }
        }
        (next, dones)
    }

    /// Steps every row; rows reaching the time limit are re-initialized
    /// from their own reset stream.
    pub fn batch_step(&self, batch: &BatchState, actions: &Tensor) -> Result<BatchStep> {
        let n = batch.len();
        if actions.shape() != [n, self.spec.action_dim] || batch.states.shape() != [n, self.spec.state_dim] {
            return Err(Error::shape("batch_step", &[batch.states.shape(), actions.shape()]));
        }
        let (terminal_states, rewards) = self.transition(&batch.states, actions)?;
        let (next, dones) = self.advance_batch(batch, &terminal_states);
        Ok(BatchStep { next, terminal_states, rewards, dones })
    }
}

/// Angle difference to upright, wrapped to `(-π, π]`.
pub fn pendulum_upright_error(theta: f64) -> f64 {
    use std::f64::consts::PI;
    let mut d = (theta - PI).rem_euclid(2.0 * PI);
    if d > PI {
        d -= 2.0 * PI;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn di() -> Env {
        Env::new(EnvKind::DoubleIntegrator)
    }

    #[test]
    fn double_integrator_examples() {
        let env = di();
        let (next, _, done) = env.step(&EnvState { values: vec![0.0, 1.0], steps_elapsed: 0 }, &[0.0]).unwrap();
        assert_eq!(next.values, vec![0.05, 1.0]);
        assert!(!done);
        let (_, r, _) = env.step(&EnvState { values: vec![1.0, 0.0], steps_elapsed: 0 }, &[0.0]).unwrap();
        assert_eq!(r, -1.0);
    }

    #[test]
    fn pendulum_equilibrium() {
        let env = Env::new(EnvKind::Pendulum);
        let (next, _, _) = env.step(&EnvState { values: vec![0.0, 0.0], steps_elapsed: 0 }, &[0.0]).unwrap();
        assert_eq!(next.values, vec![0.0, 0.0]);
    }

    #[test]
    fn time_limit_done() {
        let env = di().with_max_episode_steps(3);
        let (_, _, done) = env.step(&EnvState { values: vec![0.0, 0.0], steps_elapsed: 2 }, &[0.0]).unwrap();
        assert!(done);
    }

    #[test]
    fn non_finite_rejected() {
        let env = di();
        let s = EnvState { values: vec![f64::NAN, 0.0], steps_elapsed: 0 };
        assert!(matches!(env.step(&s, &[0.0]), Err(Error::NonFinite(_))));
        let s = EnvState { values: vec![0.0, 0.0], steps_elapsed: 0 };
        assert!(env.step(&s, &[f64::INFINITY]).is_err());
    }

    #[test]
    fn action_is_clipped() {
        let env = di();
        let s = EnvState { values: vec![0.0, 0.0], steps_elapsed: 0 };
        let (a, _, _) = env.step(&s, &[100.0]).unwrap();
        let (b, _, _) = env.step(&s, &[DOUBLE_INTEGRATOR_MAX_ACCEL]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn double_integrator_jacobians() {
        let env = di();
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::vector(vec![0.3, -0.7]));
        let a = tape.leaf(Tensor::vector(vec![0.4]));
        let next = env.dynamics_on_tape(&mut tape, s, a).unwrap();
        let mut jac_s = vec![];
        let mut jac_a = vec![];
        for i in 0..2 {
            let mut t = tape.clone();
            let c = t.slice(next, i, i + 1).unwrap();
            let c = t.sum(c).unwrap();
            let g = t.backward(c).unwrap();
            jac_s.push(g.get(s).unwrap().data().to_vec());
            jac_a.push(g.get(a).unwrap().item());
        }
        let expect = [[1.0, 0.05], [0.0, 1.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((jac_s[i][j] - expect[i][j]).abs() < 1e-15);
            }
        }
        assert!((jac_a[0] - 0.0025).abs() < 1e-15);
        assert!((jac_a[1] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn pendulum_velocity_jacobian_at_bottom() {
        let env = Env::new(EnvKind::Pendulum);
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let a = tape.constant(Tensor::vector(vec![0.0]));
        let next = env.dynamics_on_tape(&mut tape, s, a).unwrap();
        let w = tape.slice(next, 1, 2).unwrap();
        let w = tape.sum(w).unwrap();
        let g = tape.backward(w).unwrap();
        let analytic = g.get(s).unwrap().data()[0];
        // central finite difference on the plain step
        let eps = 1e-5;
        let at = |th: f64| env.step(&EnvState { values: vec![th, 0.0], steps_elapsed: 0 }, &[0.0]).unwrap().0.values[1];
        let fd = (at(eps) - at(-eps)) / (2.0 * eps);
        assert!((fd - (-0.4905)).abs() < 1e-8, "{fd}");
        assert!((analytic - fd).abs() < 1e-8);
    }

    #[test]
    fn reset_is_deterministic() {
        for kind in [EnvKind::DoubleIntegrator, EnvKind::Pendulum, EnvKind::Cartpole] {
            let env = Env::new(kind);
            assert_eq!(env.reset(11), env.reset(11));
            assert_eq!(env.reset(11).steps_elapsed, 0);
        }
    }

    #[test]
    fn pendulum_reset_velocity_mean() {
        let env = Env::new(EnvKind::Pendulum);
        let n = 10_000;
        let mean: f64 = (0..n).map(|i| env.reset_row(3, i, 0).values[1]).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "{mean}");
        assert!((0..n).all(|i| {
            let th = env.reset_row(3, i, 0).values[0];
            th > -std::f64::consts::PI && th <= std::f64::consts::PI
        }));
    }

    #[test]
    fn batch_matches_scalar_step() {
        for kind in [EnvKind::DoubleIntegrator, EnvKind::Pendulum, EnvKind::Cartpole] {
            let env = Env::new(kind);
            let batch = env.reset_batch(5, 3);
            let actions = Tensor::matrix(3, 1, vec![0.3, -1.2, 2.0]).unwrap();
            let out = env.batch_step(&batch, &actions).unwrap();
            for row in 0..3 {
                let s = EnvState { values: batch.states.row(row).to_vec(), steps_elapsed: 0 };
                let (next, r, done) = env.step(&s, actions.row(row)).unwrap();
                assert_eq!(next.values, out.next.states.row(row));
                assert_eq!(r.to_bits(), out.rewards[row].to_bits());
                assert_eq!(done, out.dones[row]);
            }
        }
    }

    #[test]
    fn identical_rows_stay_identical() {
        let env = Env::new(EnvKind::Cartpole);
        let mut batch = env.reset_batch(1, 2);
        let row0 = batch.states.row(0).to_vec();
        batch.states.data_mut()[4..8].copy_from_slice(&row0);
        let out = env.batch_step(&batch, &Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(out.next.states.row(0), out.next.states.row(1));
    }

    #[test]
    fn done_rows_are_reset() {
        let env = di().with_max_episode_steps(2);
        let mut batch = env.reset_batch(9, 2);
        batch.steps_elapsed[1] = 1;
        let out = env.batch_step(&batch, &Tensor::zeros(&[2, 1])).unwrap();
        assert_eq!(out.dones, vec![false, true]);
        assert_eq!(out.next.steps_elapsed, vec![1, 0]);
        assert_eq!(out.next.episodes, vec![0, 1]);
        assert_eq!(out.next.states.row(1), env.reset_row(9, 1, 1).values.as_slice());
        assert_ne!(out.terminal_states.row(1), out.next.states.row(1));
    }

    #[test]
    fn upright_error_wraps() {
        use std::f64::consts::PI;
        assert!(pendulum_upright_error(PI).abs() < 1e-15);
        assert!(pendulum_upright_error(3.0 * PI).abs() < 1e-12);
        assert!((pendulum_upright_error(0.0).abs() - PI).abs() < 1e-12);
        assert!((pendulum_upright_error(PI + 0.1) - 0.1).abs() < 1e-12);
    }
}
