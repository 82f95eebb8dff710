//! Broadcast-and-listen emergent communication for cooperative multi-agent
//! reinforcement learning.
//!
//! - [`commnet`]: the shared-parameter policy with multiplicative
//!   self-attention over broadcast messages.
//! - [`envs`]: Pulling Levers and Predator-Prey.
//! - [`trainer`]: PPO with GAE and an optional centralized value baseline.
//! - [`probes`]: positive listening / signaling classifiers.
//! - [`atlas`]: exact t-SNE atlases and message recommendation.
//! - [`checkpoint`], [`config`], [`dataset`]: persistence formats.

pub mod atlas;
pub mod checkpoint;
pub mod commnet;
pub mod config;
pub mod dataset;
pub mod envs;
mod gradcheck;
mod error;
pub mod probes;
pub mod protocol;
pub mod trainer;

pub use error::CoreError;
pub use gradcheck::{ppo_loss_gradcheck, TIE_MARGIN};
pub use protocol::{AttentionMode, Protocol, ProtocolKind};
