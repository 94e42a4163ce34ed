//! Python bindings: configuration, environments, the autodiff tape, training
//! and diagnostics.

use std::path::PathBuf;

use dmo_core::algorithms::{EpochMetrics, Pathway, Trainer as CoreTrainer};
use dmo_core::checkpoint::Archive;
use dmo_core::config::ExperimentConfig;
use dmo_core::critic::{td_lambda_targets as core_td_lambda, DoneHandling};
use dmo_core::diagnostics;
use dmo_core::envs::{Env as CoreEnv, EnvState};
use dmo_core::harness;
use dmo_core::{Error, NodeId, Tape as CoreTape, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        3 => PyRuntimeError::new_err(e.to_string()),
        4 => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(data: Vec<f64>, shape: Option<Vec<usize>>) -> PyResult<Tensor> {
    let shape = shape.unwrap_or_else(|| vec![data.len()]);
    Tensor::new(shape, data).map_err(to_py)
}

#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct Config {
    inner: ExperimentConfig,
}

#[pymethods]
impl Config {
    /// Defaults, optionally overridden by `key=value` keyword arguments.
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        Self { inner: ExperimentConfig::default() }.with_overrides(overrides)
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        ExperimentConfig::from_file(&path).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        ExperimentConfig::parse_str(text).map(|inner| Self { inner }).map_err(to_py)
    }

    #[pyo3(signature = (**overrides))]
    fn with_overrides(&self, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        if let Some(d) = overrides {
            for (k, v) in d.iter() {
                pairs.push((k.extract()?, v.str()?.to_string()));
            }
        }
        let refs: Vec<(&str, String)> = pairs.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
        self.inner.clone().with_overrides(&refs).map(|inner| Self { inner }).map_err(to_py)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn hash(&self) -> u64 {
        self.inner.hash()
    }

    fn total_epochs(&self) -> u64 {
        self.inner.total_epochs()
    }

    #[getter]
    fn algo(&self) -> &'static str {
        self.inner.algo.name()
    }

    #[getter]
    fn env(&self) -> &'static str {
        self.inner.env.name()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    fn __repr__(&self) -> String {
        format!("Config(algo={}, env={})", self.inner.algo.name(), self.inner.env.name())
    }
}

#[pyclass(name = "Env")]
struct Env {
    inner: CoreEnv,
}

#[pymethods]
impl Env {
    #[new]
    #[pyo3(signature = (name, max_episode_steps = None))]
    fn new(name: &str, max_episode_steps: Option<usize>) -> PyResult<Self> {
        let mut inner = CoreEnv::from_name(name).map_err(to_py)?;
        if let Some(steps) = max_episode_steps {
            inner = inner.with_max_episode_steps(steps);
        }
        Ok(Self { inner })
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.spec().state_dim
    }

    #[getter]
    fn action_dim(&self) -> usize {
        self.inner.spec().action_dim
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.spec().dt
    }

    fn reset(&self, seed: u64) -> Vec<f64> {
        self.inner.reset(seed).values
    }

    /// `(next_state, reward, done)`; `steps_elapsed` counts steps already
    /// taken in the episode.
    #[pyo3(signature = (state, action, steps_elapsed = 0))]
    fn step(&self, state: Vec<f64>, action: Vec<f64>, steps_elapsed: usize) -> PyResult<(Vec<f64>, f64, bool)> {
        let s = EnvState { values: state, steps_elapsed };
        let (next, r, done) = self.inner.step(&s, &action).map_err(to_py)?;
        Ok((next.values, r, done))
    }
}

/// Reverse-mode tape over row-major f64 tensors. Nodes are integer handles.
#[pyclass(name = "Tape", unsendable)]
struct Tape {
    inner: CoreTape,
    ids: Vec<NodeId>,
}

impl Tape {
    fn id(&self, h: usize) -> PyResult<NodeId> {
        self.ids.get(h).copied().ok_or_else(|| PyValueError::new_err(format!("unknown node {h}")))
    }

    fn push(&mut self, id: dmo_core::Result<NodeId>) -> PyResult<usize> {
        let id = id.map_err(to_py)?;
        while self.ids.len() <= id.index() {
            self.ids.push(id);
        }
        self.ids[id.index()] = id;
        Ok(id.index())
    }
}

#[pymethods]
impl Tape {
    #[new]
    fn new() -> Self {
        Self { inner: CoreTape::new(), ids: Vec::new() }
    }

    #[pyo3(signature = (data, shape = None))]
    fn leaf(&mut self, data: Vec<f64>, shape: Option<Vec<usize>>) -> PyResult<usize> {
        let t = tensor(data, shape)?;
        let id = self.inner.leaf(t);
        self.push(Ok(id))
    }

    #[pyo3(signature = (data, shape = None))]
    fn constant(&mut self, data: Vec<f64>, shape: Option<Vec<usize>>) -> PyResult<usize> {
        let t = tensor(data, shape)?;
        let id = self.inner.constant(t);
        self.push(Ok(id))
    }

    fn add(&mut self, a: usize, b: usize) -> PyResult<usize> {
        let (a, b) = (self.id(a)?, self.id(b)?);
        let r = self.inner.add(a, b);
        self.push(r)
    }

    fn sub(&mut self, a: usize, b: usize) -> PyResult<usize> {
        let (a, b) = (self.id(a)?, self.id(b)?);
        let r = self.inner.sub(a, b);
        self.push(r)
    }

    fn mul(&mut self, a: usize, b: usize) -> PyResult<usize> {
        let (a, b) = (self.id(a)?, self.id(b)?);
        let r = self.inner.mul(a, b);
        self.push(r)
    }

    fn matmul(&mut self, a: usize, b: usize) -> PyResult<usize> {
        let (a, b) = (self.id(a)?, self.id(b)?);
        let r = self.inner.matmul(a, b);
        self.push(r)
    }

    fn tanh(&mut self, x: usize) -> PyResult<usize> {
        let x = self.id(x)?;
        let r = self.inner.tanh(x);
        self.push(r)
    }

    fn exp(&mut self, x: usize) -> PyResult<usize> {
        let x = self.id(x)?;
        let r = self.inner.exp(x);
        self.push(r)
    }

    fn square(&mut self, x: usize) -> PyResult<usize> {
        let x = self.id(x)?;
        let r = self.inner.square(x);
        self.push(r)
    }

    fn sum(&mut self, x: usize) -> PyResult<usize> {
        let x = self.id(x)?;
        let r = self.inner.sum(x);
        self.push(r)
    }

    /// Forward value `real`, adjoint routed to `predicted`.
    fn grad_swap(&mut self, predicted: usize, real: Vec<f64>) -> PyResult<usize> {
        let p = self.id(predicted)?;
        let shape = self.inner.shape(p).to_vec();
        let t = tensor(real, Some(shape))?;
        let r = self.inner.grad_swap(p, t);
        self.push(r)
    }

    fn value(&self, x: usize) -> PyResult<Vec<f64>> {
        Ok(self.inner.value(self.id(x)?).data().to_vec())
    }

    fn shape(&self, x: usize) -> PyResult<Vec<usize>> {
        Ok(self.inner.shape(self.id(x)?).to_vec())
    }

    /// Gradients of a scalar `root` keyed by node handle.
    fn backward(&self, root: usize) -> PyResult<Vec<(usize, Vec<f64>)>> {
        let g = self.inner.backward(self.id(root)?).map_err(to_py)?;
        Ok(self
            .ids
            .iter()
            .filter_map(|&id| g.get(id).map(|t| (id.index(), t.data().to_vec())))
            .collect())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &EpochMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", m.epoch)?;
    d.set_item("env_steps", m.env_steps)?;
    d.set_item("episodic_return", m.episodic_return)?;
    d.set_item("policy_loss", m.policy_loss)?;
    d.set_item("critic_loss", m.critic_loss)?;
    d.set_item("model_nll", m.model_nll)?;
    d.set_item("grad_norm", m.grad_norm)?;
    d.set_item("cos_dmo_true", m.cos_dmo_true)?;
    d.set_item("cos_fwd_true", m.cos_fwd_true)?;
    d.set_item("alpha", m.alpha)?;
    Ok(d)
}

#[pyclass(name = "Trainer", unsendable)]
struct Trainer {
    inner: CoreTrainer,
}

#[pymethods]
impl Trainer {
    #[new]
    fn new(config: &Config, seed: u64) -> PyResult<Self> {
        CoreTrainer::new(&config.inner, seed).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let archive = Archive::read(&path).map_err(to_py)?;
        CoreTrainer::load(&archive).map(|inner| Self { inner }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save().write(&path).map_err(to_py)
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.inner.epoch
    }

    #[getter]
    fn env_steps(&self) -> u64 {
        self.inner.env_steps
    }

    /// One training epoch; metrics as a dict, cosines filled when requested.
    #[pyo3(signature = (report_cosines = false))]
    fn train_epoch<'py>(&mut self, py: Python<'py>, report_cosines: bool) -> PyResult<Bound<'py, PyDict>> {
        let m = self.inner.train_epoch_with(report_cosines).map_err(to_py)?;
        metrics_dict(py, &m)
    }

    /// `(loss, flat gradient)` through `pathway`: "true", "decoupled" or
    /// "model_forward".
    fn policy_gradient(&self, pathway: &str) -> PyResult<(f64, Vec<f64>)> {
        let p = match pathway {
            "true" => Pathway::True,
            "decoupled" => Pathway::Decoupled,
            "model_forward" => Pathway::ModelForward,
            _ => return Err(PyValueError::new_err(format!("unknown pathway `{pathway}`"))),
        };
        self.inner.policy_gradient(p).map_err(to_py)
    }

    /// Mean-action evaluation over `episodes` episodes.
    #[pyo3(signature = (episodes = 20))]
    fn evaluate<'py>(&self, py: Python<'py>, episodes: usize) -> PyResult<Bound<'py, PyDict>> {
        let r = harness::evaluate(&self.inner, episodes).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("mean_return", r.mean_return)?;
        d.set_item("mean_discounted_return", r.mean_discounted_return)?;
        d.set_item("returns", r.returns)?;
        d.set_item("final_states", r.final_states)?;
        Ok(d)
    }

    fn mean_action(&self, states: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let rows = states.len();
        let data: Vec<f64> = states.into_iter().flatten().collect();
        let cols = data.len().checked_div(rows).unwrap_or(0);
        let t = tensor(data, Some(vec![rows, cols]))?;
        let a = self.inner.actor.mean_action(&t).map_err(to_py)?;
        Ok((0..rows).map(|i| a.row(i).to_vec()).collect())
    }
}

/// TD(λ) targets; `rewards` and `dones` are `[H][N]`, `values` is `[H+1][N]`.
#[pyfunction]
#[pyo3(signature = (rewards, values, dones, gamma, lam, bootstrap_timeout = true))]
fn td_lambda_targets(
    rewards: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    dones: Vec<Vec<bool>>,
    gamma: f64,
    lam: f64,
    bootstrap_timeout: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let h = rewards.len();
    let n = rewards.first().map_or(0, |r| r.len());
    let r = tensor(rewards.into_iter().flatten().collect(), Some(vec![h, n]))?;
    let v = tensor(values.into_iter().flatten().collect(), Some(vec![h + 1, n]))?;
    let handling = if bootstrap_timeout { DoneHandling::BootstrapTimeout } else { DoneHandling::Terminate };
    let out = core_td_lambda(&r, &v, &dones, gamma, lam, handling).map_err(to_py)?;
    Ok((0..h).map(|t| out.targets.row(t).to_vec()).collect())
}

/// Cosine of two flat vectors; NaN when either norm is degenerate.
#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let c = diagnostics::cosine_similarity(&a, &b).map_err(to_py)?;
    Ok(if c.degenerate { f64::NAN } else { c.value })
}

/// Trains every seed of `config`, writing CSVs and checkpoints; returns CSV paths.
#[pyfunction]
fn run(config: &Config) -> PyResult<Vec<PathBuf>> {
    Ok(harness::run(&config.inner).map_err(to_py)?.into_iter().map(|o| o.csv).collect())
}

#[pyfunction]
fn summarize(pattern: &str, out: PathBuf) -> PyResult<usize> {
    harness::summarize_glob(pattern, &out).map_err(to_py)
}

#[pymodule]
fn dmo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Env>()?;
    m.add_class::<Tape>()?;
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(td_lambda_targets, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add("CSV_HEADER", diagnostics::CSV_HEADER)?;
    Ok(())
}
