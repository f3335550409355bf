//! Data-driven fine-tuning of a simulated locomotion policy for a
//! hard-to-simulate objective (battery power).
//!
//! A hidden-physics twin of the simulator plays the real robot. Its measured
//! battery current trains a recurrent current model, which is injected into
//! simulation as a reward. KL-anchored PPO fine-tunes candidates over a sweep
//! of reward weights and KL bounds, and a two-stage selection (simulation,
//! then real) picks the next anchor.

pub mod cli;
pub mod config;
pub mod diffkit;
pub mod envsim;
pub mod error;
pub mod measurement;
pub mod metrics;
pub mod persist;
pub mod pipeline;
pub mod policy;
pub mod realworld;
pub mod rl;

pub use error::{Error, Result};
