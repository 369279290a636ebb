//! Orchestration engine for tool-augmented, interleaved visual-text
//! reasoning over videos.
//!
//! The engine runs the multi-turn loop (question, reasoning text, tool
//! call, returned clip, ..., answer), scores finished trajectories with a
//! verifiable reward, normalizes rewards within rollout groups, builds
//! SFT and RL datasets, and evaluates policies with tool-usage analytics.
//! Tools run either as exact oracles over synthetic worlds or against
//! remote model servers.

pub mod config;
pub mod datapipe;
pub mod harness;
pub mod history;
mod http;
pub mod policy;
pub mod protocol;
pub mod scalar;
pub mod seed;
pub mod synthworld;
pub mod toolkit;
pub mod reward;
pub mod rollout;

/// Reward breakdown in the default float type.
pub type Reward = reward::RewardBreakdown<f64>;
/// Reward breakdown with exact rational totals.
pub type ExactReward = reward::RewardBreakdown<num_rational::Rational64>;
