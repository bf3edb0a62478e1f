//! Event-driven behavioral diversity for cooperative multi-agent
//! reinforcement learning.
//!
//! A shared policy backbone is adapted per agent by low-rank factors emitted
//! from an attention hypernetwork. The hypernetwork is queried once per
//! episode and again whenever the environment reports an event. A scalar
//! rescales the adapters so that the team's measured behavioral diversity
//! matches a requested target exactly.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diversity;
pub mod env;
pub mod error;
pub mod eval;
pub mod event;
pub mod hypernet;
pub mod model;
pub mod numeric;
pub mod policy;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
