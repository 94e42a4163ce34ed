//! Finite-difference and grad-swap checks shared by the integration tests and
//! the acceptance report.
#![allow(dead_code)]

use dmo_core::actor::{Actor, StdMode};
use dmo_core::critic::Critic;
use dmo_core::dynamics_model::DynamicsModel;
use dmo_core::envs::{Env, EnvKind};
use dmo_core::nn::{Activation, Mlp};
use dmo_core::{NodeId, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;
pub const CASES_PER_OP: usize = 100;

type Build = dyn Fn(&mut Tape, &[NodeId]) -> dmo_core::Result<NodeId>;

/// One differentiable function of some input tensors.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub build: Box<Build>,
}

fn weighted_root(tape: &mut Tape, out: NodeId, weights: &Tensor) -> NodeId {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w).unwrap();
    tape.sum(p).unwrap()
}

fn evaluate(case: &Case, inputs: &[Tensor], weights: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.build)(&mut tape, &ids).unwrap();
    let root = weighted_root(&mut tape, out, weights);
    tape.value(root).item()
}

/// Norm-wise relative error `|g_ad - g_fd| / max(|g_ad|, |g_fd|)` between the
/// tape gradient and central differences of a random projection of the
/// output, over all input elements. Zero when both gradients vanish.
pub fn fd_relative_error(case: &Case, rng: &mut ChaCha8Rng) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.build)(&mut tape, &ids).unwrap();
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let weights = Tensor::new(shape.clone(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let root = weighted_root(&mut tape, out, &weights);
    let grads = tape.backward(root).unwrap();
    let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get_or_zeros(*id, case.inputs[k].shape());
        for i in 0..case.inputs[k].numel() {
            let mut plus = case.inputs.clone();
            plus[k].data_mut()[i] += FD_EPS;
            let mut minus = case.inputs.clone();
            minus[k].data_mut()[i] -= FD_EPS;
            let fd = (evaluate(case, &plus, &weights) - evaluate(case, &minus, &weights)) / (2.0 * FD_EPS);
            let a = analytic.data()[i];
            diff += (a - fd) * (a - fd);
            na += a * a;
            nf += fd * fd;
        }
    }
    let denom = na.sqrt().max(nf.sqrt());
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from `kinks` by at least `margin`.
fn tensor_avoiding(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], margin: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (x - k).abs() > margin) {
                break x;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn random_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    if rng.random_bool(0.5) {
        vec![rng.random_range(1..6)]
    } else {
        vec![rng.random_range(1..4), rng.random_range(1..5)]
    }
}

fn matrix_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.random_range(1..4), rng.random_range(1..5)]
}

fn unary(rng: &mut ChaCha8Rng, lo: f64, hi: f64, f: fn(&mut Tape, NodeId) -> dmo_core::Result<NodeId>) -> Case {
    let shape = random_shape(rng);
    Case { inputs: vec![tensor(rng, &shape, lo, hi)], build: Box::new(move |t, x| f(t, x[0])) }
}

fn binary(rng: &mut ChaCha8Rng, f: fn(&mut Tape, NodeId, NodeId) -> dmo_core::Result<NodeId>, positive_b: bool) -> Case {
    let shape = random_shape(rng);
    let a = tensor(rng, &shape, -2.0, 2.0);
    let b = if positive_b {
        let mag = tensor(rng, &shape, 0.5, 2.0);
        let sign = rng.random_bool(0.5);
        if sign {
            mag.map(|x| -x)
        } else {
            mag
        }
    } else {
        tensor(rng, &shape, -2.0, 2.0)
    };
    Case { inputs: vec![a, b], build: Box::new(move |t, x| f(t, x[0], x[1])) }
}

/// Names of the ops covered by [`op_case`].
pub const FD_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "add_bias",
    "broadcast_rows",
    "matmul",
    "sum",
    "sum_last",
    "mean",
    "neg",
    "exp",
    "log",
    "tanh",
    "elu",
    "silu",
    "softplus",
    "square",
    "sin",
    "cos",
    "scale",
    "offset",
    "clamp",
    "minimum",
    "concat",
    "slice",
    "reshape",
    "reparam_sample",
    "gaussian_nll",
];

/// A randomized instance of `op`.
pub fn op_case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    match op {
        "add" => binary(rng, Tape::add, false),
        "sub" => binary(rng, Tape::sub, false),
        "mul" => binary(rng, Tape::mul, false),
        "div" => binary(rng, Tape::div, true),
        "add_bias" => {
            let s = matrix_shape(rng);
            let x = tensor(rng, &s, -2.0, 2.0);
            let b = tensor(rng, &[s[1]], -2.0, 2.0);
            Case { inputs: vec![x, b], build: Box::new(|t, x| t.add_bias(x[0], x[1])) }
        }
        "broadcast_rows" => {
            let rows = rng.random_range(1..5);
            let w = rng.random_range(1..5);
            let x = tensor(rng, &[w], -2.0, 2.0);
            Case { inputs: vec![x], build: Box::new(move |t, x| t.broadcast_rows(x[0], rows)) }
        }
        "matmul" => {
            let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
            let (sa, sb) = match rng.random_range(0..3) {
                0 => (vec![m, k], vec![k, n]),
                1 => (vec![m, k], vec![k]),
                _ => (vec![k], vec![k, n]),
            };
            let a = tensor(rng, &sa, -2.0, 2.0);
            let b = tensor(rng, &sb, -2.0, 2.0);
            Case { inputs: vec![a, b], build: Box::new(|t, x| t.matmul(x[0], x[1])) }
        }
        "sum" => unary(rng, -2.0, 2.0, Tape::sum),
        "sum_last" => unary(rng, -2.0, 2.0, Tape::sum_last),
        "mean" => unary(rng, -2.0, 2.0, Tape::mean),
        "neg" => unary(rng, -2.0, 2.0, Tape::neg),
        "exp" => unary(rng, -2.0, 2.0, Tape::exp),
        "log" => unary(rng, 0.2, 3.0, Tape::log),
        "tanh" => unary(rng, -2.0, 2.0, Tape::tanh),
        "elu" => unary(rng, -2.0, 2.0, Tape::elu),
        "silu" => unary(rng, -3.0, 3.0, Tape::silu),
        "softplus" => unary(rng, -3.0, 3.0, Tape::softplus),
        "square" => unary(rng, -2.0, 2.0, Tape::square),
        "sin" => unary(rng, -3.0, 3.0, Tape::sin),
        "cos" => unary(rng, -3.0, 3.0, Tape::cos),
        "scale" => {
            let c = rng.random_range(-3.0..3.0);
            let shape = random_shape(rng);
            let x = tensor(rng, &shape, -2.0, 2.0);
            Case { inputs: vec![x], build: Box::new(move |t, x| t.scale(x[0], c)) }
        }
        "offset" => {
            let c = rng.random_range(-3.0..3.0);
            let shape = random_shape(rng);
            let x = tensor(rng, &shape, -2.0, 2.0);
            Case { inputs: vec![x], build: Box::new(move |t, x| t.offset(x[0], c)) }
        }
        "clamp" => {
            let (lo, hi) = (-0.7, 0.9);
            let shape = random_shape(rng);
            let x = tensor_avoiding(rng, &shape, -2.0, 2.0, &[lo, hi], 1e-3);
            Case { inputs: vec![x], build: Box::new(move |t, x| t.clamp(x[0], lo, hi)) }
        }
        "minimum" => {
            let shape = random_shape(rng);
            let a = tensor(rng, &shape, -2.0, 2.0);
            let gap = tensor_avoiding(rng, &shape, -1.0, 1.0, &[0.0], 1e-3);
            let b = a.zip_map(&gap, |x, g| x + g);
            Case { inputs: vec![a, b], build: Box::new(|t, x| t.minimum(x[0], x[1])) }
        }
        "concat" => {
            let rows = rng.random_range(1..4);
            let parts = rng.random_range(1..4);
            let inputs = (0..parts)
                .map(|_| {
                    let w = rng.random_range(1..4);
                    tensor(rng, &[rows, w], -2.0, 2.0)
                })
                .collect();
            Case { inputs, build: Box::new(|t, x| t.concat(x)) }
        }
        "slice" => {
            let s = matrix_shape(rng);
            let start = rng.random_range(0..s[1]);
            let end = rng.random_range(start + 1..=s[1]);
            let x = tensor(rng, &s, -2.0, 2.0);
            Case { inputs: vec![x], build: Box::new(move |t, x| t.slice(x[0], start, end)) }
        }
        "reshape" => {
            let s = matrix_shape(rng);
            let x = tensor(rng, &s, -2.0, 2.0);
            let flat = vec![s[0] * s[1]];
            Case { inputs: vec![x], build: Box::new(move |t, x| t.reshape(x[0], flat.clone())) }
        }
        "reparam_sample" => {
            let shape = random_shape(rng);
            let mean = tensor(rng, &shape, -2.0, 2.0);
            let log_std = tensor(rng, &shape, -1.5, 0.5);
            let noise = tensor(rng, &shape, -2.0, 2.0);
            Case { inputs: vec![mean, log_std], build: Box::new(move |t, x| t.reparam_sample(x[0], x[1], noise.clone())) }
        }
        "gaussian_nll" => {
            let shape = random_shape(rng);
            let mean = tensor(rng, &shape, -2.0, 2.0);
            let log_std = tensor(rng, &shape, -1.0, 1.0);
            let target = tensor(rng, &shape, -2.0, 2.0);
            Case { inputs: vec![mean, log_std, target], build: Box::new(|t, x| t.gaussian_nll(x[0], x[1], x[2])) }
        }
        other => panic!("no finite-difference case for `{other}`"),
    }
}

/// Worst relative error of `op` over `cases` random instances.
pub fn check_op(op: &str, cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases).map(|_| fd_relative_error(&op_case(op, &mut rng), &mut rng)).fold(0.0, f64::max)
}

pub const NETWORKS: &[&str] = &["mlp_elu", "mlp_silu", "mlp_tanh", "actor", "sapo_actor", "model", "critic_ensemble", "env_steps"];

fn params_of(net: &Mlp) -> Vec<Tensor> {
    net.params().into_iter().cloned().collect()
}

/// A composed network as a function of its parameters and input.
pub fn network_case(name: &str, rng: &mut ChaCha8Rng) -> Case {
    let seed = rng.random::<u64>();
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    match name {
        "mlp_elu" | "mlp_silu" | "mlp_tanh" => {
            let act = match name {
                "mlp_elu" => Activation::Elu,
                "mlp_silu" => Activation::Silu,
                _ => Activation::Tanh,
            };
            let net = Mlp::new(&[3, 5, 4, 1], act, false, &mut init);
            let mut inputs = params_of(&net);
            inputs.push(tensor(rng, &[2, 3], -1.5, 1.5));
            let np = net.params().len();
            Case {
                inputs,
                build: Box::new(move |t, x| {
                    let (p, input) = x.split_at(np);
                    net.forward(t, p, input[0])
                }),
            }
        }
        "actor" | "sapo_actor" => {
            let env = Env::new(EnvKind::Pendulum);
            let mode = if name == "actor" { StdMode::Global } else { StdMode::StateDependent };
            let actor = Actor::new(&env, &[6, 5], Activation::Elu, mode, -0.5, &mut init);
            let mut inputs: Vec<Tensor> = actor.params().into_iter().cloned().collect();
            let np = inputs.len();
            inputs.push(tensor(rng, &[3, 2], -2.0, 2.0));
            let noise = tensor(rng, &[3, 1], -1.5, 1.5);
            Case {
                inputs,
                build: Box::new(move |t, x| {
                    let (p, s) = x.split_at(np);
                    let out = actor.act_on_tape(t, p, s[0], &noise)?;
                    let lp = t.reshape(out.log_prob, vec![3, 1])?;
                    t.concat(&[out.action, lp])
                }),
            }
        }
        "model" => {
            let env = Env::new(EnvKind::Cartpole);
            let mut model = DynamicsModel::new(&env, &[6, 6], Activation::Silu, &mut init);
            // a non-trivial output layer so the Jacobian is not the identity
            let last = model.net.weights.len() - 1;
            let w = tensor(rng, model.net.weights[last].shape(), -0.5, 0.5);
            model.net.weights[last] = w;
            let s = tensor(rng, &[2, 4], -1.0, 1.0);
            let a = tensor(rng, &[2, 1], -3.0, 3.0);
            Case { inputs: vec![s, a], build: Box::new(move |t, x| model.predict_on_tape(t, x[0], x[1])) }
        }
        "critic_ensemble" => {
            let env = Env::new(EnvKind::DoubleIntegrator);
            let critic = Critic::new(&env, &[5], Activation::Elu, 3, None, &mut init).unwrap();
            let s = tensor(rng, &[4, 2], -1.5, 1.5);
            Case { inputs: vec![s], build: Box::new(move |t, x| critic.value_on_tape(t, x[0], false)) }
        }
        "env_steps" => {
            let kind = [EnvKind::DoubleIntegrator, EnvKind::Pendulum, EnvKind::Cartpole][rng.random_range(0..3)];
            let env = Env::new(kind);
            let sd = env.spec().state_dim;
            let bound = env.spec().action_high[0];
            let s = tensor(rng, &[2, sd], -1.0, 1.0);
            let a = tensor(rng, &[2, 1], -0.8 * bound, 0.8 * bound);
            Case {
                inputs: vec![s, a],
                build: Box::new(move |t, x| {
                    let (next, r) = env.step_on_tape(t, x[0], x[1])?;
                    let r = t.reshape(r, vec![2, 1])?;
                    t.concat(&[next, r])
                }),
            }
        }
        other => panic!("unknown network `{other}`"),
    }
}

pub fn check_network(name: &str, cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases).map(|_| fd_relative_error(&network_case(name, &mut rng), &mut rng)).fold(0.0, f64::max)
}

/// Checks the grad-swap contract on one random instance: forward value is
/// the real tensor bitwise, the predicted input receives exactly the
/// incoming adjoint, and nothing upstream of the real value is touched.
pub fn grad_swap_case(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let shape = random_shape(rng);
    let predicted_src = tensor(rng, &shape, -3.0, 3.0);
    let real_src = tensor(rng, &shape, -3.0, 3.0);
    let weights = tensor(rng, &shape, -1.0, 1.0);
    let mut tape = Tape::new();
    let p_leaf = tape.leaf(predicted_src.clone());
    let predicted = tape.tanh(p_leaf).map_err(|e| e.to_string())?;
    let r_leaf = tape.leaf(real_src.clone());
    let real_node = tape.sin(r_leaf).map_err(|e| e.to_string())?;
    let real = tape.value(real_node).clone();
    let swapped = tape.grad_swap(predicted, real.clone()).map_err(|e| e.to_string())?;
    if tape.value(swapped).data().iter().zip(real.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err("forward value differs from the real tensor".into());
    }
    if tape.value(swapped).shape() != real.shape() {
        return Err("forward shape differs".into());
    }
    // L = sum(w * swapped^2): incoming adjoint 2 w swapped
    let sq = tape.square(swapped).map_err(|e| e.to_string())?;
    let root = weighted_root(&mut tape, sq, &weights);
    let grads = tape.backward(root).map_err(|e| e.to_string())?;
    let adj = grads.get_or_zeros(predicted, &shape);
    for ((g, w), r) in adj.data().iter().zip(weights.data()).zip(real.data()) {
        if g.to_bits() != (2.0 * w * r).to_bits() {
            return Err(format!("predicted adjoint {g} differs from routed adjoint {}", 2.0 * w * r));
        }
    }
    if grads.get_or_zeros(real_node, &shape).data().iter().any(|&g| g != 0.0)
        || grads.get_or_zeros(r_leaf, &shape).data().iter().any(|&g| g != 0.0)
    {
        return Err("adjoint leaked into the real path".into());
    }
    let expected_leaf: Vec<f64> =
        adj.data().iter().zip(predicted_src.data()).map(|(g, x)| g * (1.0 - x.tanh() * x.tanh())).collect();
    let got = grads.get_or_zeros(p_leaf, &shape);
    if got.data().iter().zip(&expected_leaf).any(|(a, b)| (a - b).abs() > 1e-14 * (1.0 + b.abs())) {
        return Err("adjoint did not propagate past the predicted input".into());
    }
    if tape.grad_swap(predicted, Tensor::zeros(&[shape.iter().product::<usize>() + 1])).is_ok() {
        return Err("shape mismatch accepted".into());
    }
    Ok(())
}
