//! PPO with hindsight goal relabeling on a family of predator-prey environments.
//!
//! The crate is organized around the training pipeline:
//!
//! * [`env`] — parameterized pursuit environments with goal-conditioned
//!   observations and a sparse terminal reward.
//! * [`nn`] — small dense networks with manual backprop, a diagonal-Gaussian
//!   policy head, and Adam.
//! * [`ppo`] — rollout collection, GAE, and the clipped-surrogate update with
//!   approximate-KL early stopping.
//! * [`her`] — post-hoc goal substitution on complete episodes with reward and
//!   log-probability recomputation.
//! * [`run`] — a single training run: collect → relabel → GAE → update, with
//!   periodic deterministic evaluation.
//! * [`config`], [`stats`], [`svgplot`], [`checkpoint`] — experiment plumbing
//!   shared by the CLI and the browser demo.

pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod her;
pub mod nn;
pub mod ppo;
pub mod run;
pub mod stats;
pub mod svgplot;

pub use error::CoreError;
