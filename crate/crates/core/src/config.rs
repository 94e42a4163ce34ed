//! Flat `key = value` experiment configuration.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored. Lists
//! are comma separated. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use crate::algorithms::AlgoVariant;
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::nn::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Linear,
    Constant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub algo: AlgoVariant,
    pub env: EnvKind,
    pub seeds: Vec<u64>,
    pub num_actors: usize,
    pub horizon: usize,
    pub total_env_steps: u64,
    pub max_episode_steps: usize,
    pub gamma: f64,
    pub lambda: f64,
    /// Target-network step: `target <- (1 - tau) target + tau online`.
    pub critic_tau: f64,
    pub alpha_init: f64,
    /// Target entropy is this factor times the action dimension.
    pub target_entropy_factor: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub model_lr: f64,
    pub entropy_lr: f64,
    pub lr_schedule: LrSchedule,
    pub grad_clip: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub model_hidden: Vec<usize>,
    pub actor_activation: Activation,
    pub critic_activation: Activation,
    pub model_activation: Activation,
    pub actor_init_log_std: f64,
    pub critic_ensemble: usize,
    pub critic_mini_epochs: usize,
    pub critic_minibatches: usize,
    pub model_minibatches: usize,
    pub model_batch_size: usize,
    pub buffer_capacity: usize,
    pub bootstrap_on_timeout: bool,
    pub bptt_discount: f64,
    pub report_every: usize,
    pub checkpoint_every: usize,
    pub eval_episodes: usize,
    pub out_dir: String,
    pub log_wallclock: bool,
    /// Step actor rows on a thread pool.
    pub parallel_actors: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algo: AlgoVariant::DmoShac,
            env: EnvKind::Pendulum,
            seeds: vec![0, 1, 2, 3, 4],
            num_actors: 64,
            horizon: 16,
            total_env_steps: 200_000,
            max_episode_steps: 200,
            gamma: 0.99,
            lambda: 0.95,
            critic_tau: 0.8,
            alpha_init: 1.0,
            target_entropy_factor: -0.5,
            actor_lr: 2e-3,
            critic_lr: 5e-4,
            model_lr: 3e-4,
            entropy_lr: 5e-3,
            lr_schedule: LrSchedule::Linear,
            grad_clip: 1.0,
            actor_hidden: vec![128, 64, 32],
            critic_hidden: vec![64, 64],
            model_hidden: vec![128, 128],
            actor_activation: Activation::Elu,
            critic_activation: Activation::Elu,
            model_activation: Activation::Silu,
            actor_init_log_std: -1.0,
            critic_ensemble: 1,
            critic_mini_epochs: 16,
            critic_minibatches: 4,
            model_minibatches: 8,
            model_batch_size: 256,
            buffer_capacity: 1_000_000,
            bootstrap_on_timeout: true,
            bptt_discount: 1.0,
            report_every: 5,
            checkpoint_every: 0,
            eval_episodes: 20,
            out_dir: "runs".into(),
            log_wallclock: false,
            parallel_actors: false,
        }
    }
}

fn list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Option<Vec<T>> {
    let items: Option<Vec<T>> = s.split(',').map(|x| x.trim().parse().ok()).collect();
    items.filter(|v| !v.is_empty())
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

impl ExperimentConfig {
    /// Defaults with an empty file.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut ensemble_set = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(line_no, line, "expected `key = value`"));
            };
            let key = key.trim();
            cfg.set(key, value.trim(), line_no)?;
            ensemble_set |= key == "critic_ensemble";
        }
        if !ensemble_set && cfg.algo == AlgoVariant::DmoSapo {
            cfg.critic_ensemble = 2;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Applies command-line overrides (reported as line 0), then revalidates.
    pub fn with_overrides(mut self, overrides: &[(&str, String)]) -> Result<Self> {
        let algo_before = self.algo;
        for (key, value) in overrides {
            self.set(key, value, 0)?;
        }
        let explicit_ensemble = overrides.iter().any(|(k, _)| *k == "critic_ensemble");
        if !explicit_ensemble && self.algo != algo_before {
            self.critic_ensemble = if self.algo == AlgoVariant::DmoSapo { 2 } else { 1 };
        }
        self.validate()?;
        Ok(self)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let bad = |what: &str| Error::config(line, key, format!("expected {what}, got `{value}`"));
        macro_rules! num {
            ($field:ident, $what:expr) => {
                self.$field = value.parse().map_err(|_| bad($what))?
            };
        }
        match key {
            "algo" => {
                self.algo = AlgoVariant::parse(value).ok_or_else(|| bad("an algorithm variant"))?;
            }
            "env" => self.env = EnvKind::parse(value).ok_or_else(|| bad("an environment name"))?,
            "seeds" => self.seeds = parse_list(value).ok_or_else(|| bad("a list of seeds"))?,
            "num_actors" => num!(num_actors, "an integer"),
            "horizon" => num!(horizon, "an integer"),
            "total_env_steps" => num!(total_env_steps, "an integer"),
            "max_episode_steps" => num!(max_episode_steps, "an integer"),
            "gamma" => num!(gamma, "a number"),
            "lambda" => num!(lambda, "a number"),
            "critic_tau" => num!(critic_tau, "a number"),
            "alpha_init" => num!(alpha_init, "a number"),
            "target_entropy_factor" => num!(target_entropy_factor, "a number"),
            "actor_lr" => num!(actor_lr, "a number"),
            "critic_lr" => num!(critic_lr, "a number"),
            "model_lr" => num!(model_lr, "a number"),
            "entropy_lr" => num!(entropy_lr, "a number"),
            "lr_schedule" => {
                self.lr_schedule = match value {
                    "linear" => LrSchedule::Linear,
                    "constant" => LrSchedule::Constant,
                    _ => return Err(bad("`linear` or `constant`")),
                }
            }
            "grad_clip" => num!(grad_clip, "a number"),
            "actor_hidden" => self.actor_hidden = parse_list(value).ok_or_else(|| bad("a list of widths"))?,
            "critic_hidden" => self.critic_hidden = parse_list(value).ok_or_else(|| bad("a list of widths"))?,
            "model_hidden" => self.model_hidden = parse_list(value).ok_or_else(|| bad("a list of widths"))?,
            "actor_activation" => self.actor_activation = Activation::parse(value).ok_or_else(|| bad("an activation"))?,
            "critic_activation" => {
                self.critic_activation = Activation::parse(value).ok_or_else(|| bad("an activation"))?
            }
            "model_activation" => self.model_activation = Activation::parse(value).ok_or_else(|| bad("an activation"))?,
            "actor_init_log_std" => num!(actor_init_log_std, "a number"),
            "critic_ensemble" => num!(critic_ensemble, "an integer"),
            "critic_mini_epochs" => num!(critic_mini_epochs, "an integer"),
            "critic_minibatches" => num!(critic_minibatches, "an integer"),
            "model_minibatches" => num!(model_minibatches, "an integer"),
            "model_batch_size" => num!(model_batch_size, "an integer"),
            "buffer_capacity" => num!(buffer_capacity, "an integer"),
            "bootstrap_on_timeout" => self.bootstrap_on_timeout = parse_bool(value).ok_or_else(|| bad("a boolean"))?,
            "bptt_discount" => num!(bptt_discount, "a number"),
            "report_every" => num!(report_every, "an integer"),
            "checkpoint_every" => num!(checkpoint_every, "an integer"),
            "eval_episodes" => num!(eval_episodes, "an integer"),
            "out_dir" => self.out_dir = value.to_string(),
            "log_wallclock" => self.log_wallclock = parse_bool(value).ok_or_else(|| bad("a boolean"))?,
            "parallel_actors" => self.parallel_actors = parse_bool(value).ok_or_else(|| bad("a boolean"))?,
            _ => return Err(Error::config(line, key, "unknown key")),
        }
        // per-key constraints are checked here so errors carry the line
        self.validate_key(key).map_err(|m| Error::config(line, key, m))
    }

    fn validate_key(&self, key: &str) -> std::result::Result<(), String> {
        let positive = |v: f64, name: &str| if v > 0.0 && v.is_finite() { Ok(()) } else { Err(format!("{name} must be > 0")) };
        let nonzero = |v: usize, name: &str| if v >= 1 { Ok(()) } else { Err(format!("{name} must be >= 1")) };
        let widths = |v: &[usize]| if v.iter().all(|&w| w > 0) { Ok(()) } else { Err("widths must be positive".to_string()) };
        match key {
            "gamma" if !(self.gamma > 0.0 && self.gamma < 1.0) => Err("gamma must lie in (0,1)".into()),
            "lambda" if !(0.0..=1.0).contains(&self.lambda) => Err("lambda must lie in [0,1]".into()),
            "critic_tau" if !(self.critic_tau > 0.0 && self.critic_tau <= 1.0) => {
                Err("critic_tau must lie in (0,1]".into())
            }
            "bptt_discount" if !(self.bptt_discount > 0.0 && self.bptt_discount <= 1.0) => {
                Err("bptt_discount must lie in (0,1]".into())
            }
            "actor_lr" => positive(self.actor_lr, key),
            "critic_lr" => positive(self.critic_lr, key),
            "model_lr" => positive(self.model_lr, key),
            "entropy_lr" => positive(self.entropy_lr, key),
            "alpha_init" => positive(self.alpha_init, key),
            "grad_clip" => positive(self.grad_clip, key),
            "num_actors" => nonzero(self.num_actors, key),
            "horizon" => nonzero(self.horizon, key),
            "max_episode_steps" => nonzero(self.max_episode_steps, key),
            "critic_ensemble" => nonzero(self.critic_ensemble, key),
            "critic_minibatches" => nonzero(self.critic_minibatches, key),
            "model_batch_size" => nonzero(self.model_batch_size, key),
            "buffer_capacity" => nonzero(self.buffer_capacity, key),
            "report_every" => nonzero(self.report_every, key),
            "eval_episodes" => nonzero(self.eval_episodes, key),
            "actor_hidden" => widths(&self.actor_hidden),
            "critic_hidden" => widths(&self.critic_hidden),
            "model_hidden" => widths(&self.model_hidden),
            _ => Ok(()),
        }
    }

    /// Whole-config checks, including variant requirements.
    pub fn validate(&self) -> Result<()> {
        for key in KEYS {
            self.validate_key(key).map_err(|m| Error::config(0, *key, m))?;
        }
        if self.algo == AlgoVariant::DmoSapo && self.critic_ensemble < 2 {
            return Err(Error::config(0, "critic_ensemble", "dmo_sapo needs an ensemble of at least 2 critics"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config(0, "seeds", "at least one seed is required"));
        }
        Ok(())
    }

    /// Effective configuration in the file format; parsing it back yields
    /// an equal config.
    pub fn to_text(&self) -> String {
        let act = |a: Activation| a.name();
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("algo", self.algo.name().into());
        put("env", self.env.name().into());
        put("seeds", list(&self.seeds));
        put("num_actors", self.num_actors.to_string());
        put("horizon", self.horizon.to_string());
        put("total_env_steps", self.total_env_steps.to_string());
        put("max_episode_steps", self.max_episode_steps.to_string());
        put("gamma", self.gamma.to_string());
        put("lambda", self.lambda.to_string());
        put("critic_tau", self.critic_tau.to_string());
        put("alpha_init", self.alpha_init.to_string());
        put("target_entropy_factor", self.target_entropy_factor.to_string());
        put("actor_lr", self.actor_lr.to_string());
        put("critic_lr", self.critic_lr.to_string());
        put("model_lr", self.model_lr.to_string());
        put("entropy_lr", self.entropy_lr.to_string());
        put(
            "lr_schedule",
            match self.lr_schedule {
                LrSchedule::Linear => "linear",
                LrSchedule::Constant => "constant",
            }
            .into(),
        );
        put("grad_clip", self.grad_clip.to_string());
        put("actor_hidden", list(&self.actor_hidden));
        put("critic_hidden", list(&self.critic_hidden));
        put("model_hidden", list(&self.model_hidden));
        put("actor_activation", act(self.actor_activation).into());
        put("critic_activation", act(self.critic_activation).into());
        put("model_activation", act(self.model_activation).into());
        put("actor_init_log_std", self.actor_init_log_std.to_string());
        put("critic_ensemble", self.critic_ensemble.to_string());
        put("critic_mini_epochs", self.critic_mini_epochs.to_string());
        put("critic_minibatches", self.critic_minibatches.to_string());
        put("model_minibatches", self.model_minibatches.to_string());
        put("model_batch_size", self.model_batch_size.to_string());
        put("buffer_capacity", self.buffer_capacity.to_string());
        put("bootstrap_on_timeout", self.bootstrap_on_timeout.to_string());
        put("bptt_discount", self.bptt_discount.to_string());
        put("report_every", self.report_every.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("eval_episodes", self.eval_episodes.to_string());
        put("out_dir", self.out_dir.clone());
        put("log_wallclock", self.log_wallclock.to_string());
        put("parallel_actors", self.parallel_actors.to_string());
        s
    }

    /// Target entropy `factor * dim(A)`.
    pub fn target_entropy(&self, action_dim: usize) -> f64 {
        self.target_entropy_factor * action_dim as f64
    }

    /// Env steps per training epoch, `N * H`.
    pub fn steps_per_epoch(&self) -> u64 {
        (self.num_actors * self.horizon) as u64
    }

    pub fn total_epochs(&self) -> u64 {
        self.total_env_steps.div_ceil(self.steps_per_epoch())
    }

    /// FNV-1a hash of the effective config text.
    pub fn hash(&self) -> u64 {
        self.to_text().bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
    }
}

const KEYS: &[&str] = &[
    "algo",
    "env",
    "seeds",
    "num_actors",
    "horizon",
    "total_env_steps",
    "max_episode_steps",
    "gamma",
    "lambda",
    "critic_tau",
    "alpha_init",
    "target_entropy_factor",
    "actor_lr",
    "critic_lr",
    "model_lr",
    "entropy_lr",
    "lr_schedule",
    "grad_clip",
    "actor_hidden",
    "critic_hidden",
    "model_hidden",
    "actor_activation",
    "critic_activation",
    "model_activation",
    "actor_init_log_std",
    "critic_ensemble",
    "critic_mini_epochs",
    "critic_minibatches",
    "model_minibatches",
    "model_batch_size",
    "buffer_capacity",
    "bootstrap_on_timeout",
    "bptt_discount",
    "report_every",
    "checkpoint_every",
    "eval_episodes",
    "out_dir",
    "log_wallclock",
    "parallel_actors",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::parse_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!((c.gamma, c.horizon, c.lambda), (0.99, 16, 0.95));
        assert_eq!(c.grad_clip, 1.0);
        assert_eq!(c.buffer_capacity, 1_000_000);
        assert_eq!(c.target_entropy(2), -1.0);
        assert_eq!(c.alpha_init, 1.0);
    }

    #[test]
    fn comments_and_whitespace() {
        let c = ExperimentConfig::parse_str("# header\n\n horizon = 8   # short\nenv=double_integrator\n").unwrap();
        assert_eq!(c.horizon, 8);
        assert_eq!(c.env, EnvKind::DoubleIntegrator);
    }

    #[test]
    fn gamma_out_of_range() {
        let err = ExperimentConfig::parse_str("horizon = 4\ngamma = 1.5\n").unwrap_err();
        match &err {
            Error::Config { line, key, message } => {
                assert_eq!((*line, key.as_str()), (2, "gamma"));
                assert!(message.contains("(0,1)"), "{message}");
            }
            other => panic!("{other}"),
        }
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_key_and_type_mismatch() {
        let err = ExperimentConfig::parse_str("\n\nlearning_rate = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, ref key, .. } if key == "learning_rate"));
        let err = ExperimentConfig::parse_str("horizon = sixteen").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, ref key, .. } if key == "horizon"));
        assert!(ExperimentConfig::parse_str("no equals sign").is_err());
    }

    #[test]
    fn cli_overrides_file() {
        let c = ExperimentConfig::parse_str("horizon = 32").unwrap();
        let c = c.with_overrides(&[("horizon", "8".into())]).unwrap();
        assert_eq!(c.horizon, 8);
    }

    #[test]
    fn sapo_needs_ensemble() {
        let c = ExperimentConfig::parse_str("algo = dmo_sapo").unwrap();
        assert_eq!(c.critic_ensemble, 2);
        assert!(ExperimentConfig::parse_str("algo = dmo_sapo\ncritic_ensemble = 1").is_err());
        let c = ExperimentConfig::default().with_overrides(&[("algo", "dmo_sapo".into())]).unwrap();
        assert_eq!(c.critic_ensemble, 2);
    }

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::parse_str("algo = dmo_sapo\nseeds = 3,9\nactor_lr = 0.000123456789").unwrap();
        c.gamma = 0.1 + 0.2;
        let back = ExperimentConfig::parse_str(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }
}
