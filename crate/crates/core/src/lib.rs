//! Digital-twin platform for model-based reinforcement-learning heating control.
//!
//! The crate covers the whole pipeline: a Thing Description directory
//! ([`registry`]), a file-backed legacy bridge ([`bridge`]), the thermal and
//! occupancy twins ([`thermal`], [`occupancy`]), the heating MDP with a
//! ground-truth plant ([`env`]) and a from-scratch DQN agent ([`dqn`]).

pub mod bridge;
pub mod registry;
pub mod td;
pub mod thermal;
pub mod occupancy;
pub mod env;
pub mod dqn;
