//! Offline-to-online actor-critic learning for sparse-reward goal tasks.
//!
//! The crate is organised bottom-up:
//!
//! - [`nncore`]: dense networks, gradients, Adam, target-network averaging.
//! - [`envs`]: kinematic goal-reaching tasks with an optional goal-aware
//!   observation block.
//! - [`replay`]: transitions, the replay ring buffer and demonstration files.
//! - [`agents`]: TD3, behaviour cloning, TD3+BC and the scheduled
//!   offline-to-online learner.
//! - [`demogen`]: scripted experts and degraded demonstrators.
//! - [`harness`]: experiment configs, runs, evaluation, logs and reports.

// `!(x > 0.0)` checks also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod nncore;
pub mod envs;
pub mod replay;
pub mod agents;
pub mod demogen;
pub mod harness;
