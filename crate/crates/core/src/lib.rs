//! Decoupled forward-backward model-based policy optimization.
//!
//! Rollouts are unrolled with an exact simulator while policy gradients flow
//! through a learned Gaussian dynamics model. The pieces:
//!
//! * [`tape`]: reverse-mode autodiff with the gradient-swap node.
//! * [`envs`]: differentiable toy control tasks.
//! * [`dynamics_model`]: replay buffer and the learned Gaussian model.
//! * [`critic`]: TD(λ) value targets and critic fitting.
//! * [`actor`]: squashed Gaussian policy and entropy temperature.
//! * [`algorithms`]: decoupled / true-gradient / model-forward rollouts and
//!   the training epoch.
//! * [`diagnostics`]: gradient cosine study and run aggregation.
//! * [`config`], [`checkpoint`], [`harness`]: experiment plumbing.

pub mod error;
pub mod nn;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod envs;
pub mod checkpoint;
pub mod dynamics_model;
pub mod critic;
pub mod actor;
pub mod algorithms;
pub mod config;
pub mod diagnostics;
pub mod harness;

pub use error::{Error, Result};
pub use tape::{GradientMap, NodeId, Op, OpKind, Tape};
pub use tensor::Tensor;
