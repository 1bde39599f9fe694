//! Bandit-scheduled multi-task training for small neural combinatorial-
//! optimization solvers.
//!
//! A policy with a shared encoder and per-family header/decoder segments is
//! trained on several (family, scale) tasks at once. Each round a sampler
//! picks the task to train; every `freq` steps the recorded gradients are
//! turned into a task-influence matrix whose column sums reward the sampler.
//! Exact solvers for TSP, CVRP, OP, and KP keep optimality gaps measurable.

pub mod bandit;
pub mod cli;
pub mod config;
pub mod decomp;
pub mod envs;
pub mod error;
pub mod influence;
pub mod model;
pub mod report;
pub mod rng;
pub mod task;
pub mod trainer;

pub use error::{Error, Result};
