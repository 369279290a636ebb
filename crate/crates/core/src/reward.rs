//! Verifiable reward, group-normalized advantages, and RL export.
//!
//! The total is `λ_corr·r_corr + λ_format·r_format + λ_tool·r_tool`, with
//! the tool term paid only alongside a correct answer. Weights are held as
//! exact ratios; totals are summed exactly and converted once into the
//! requested scalar type.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use num_rational::Rational64;
use num_traits::{Float, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::history::Question;
use crate::protocol::{extract_answer, is_correct, parse_all_tool_calls, parse_response};
use crate::rollout::Trajectory;
use crate::scalar::{parse_decimal_ratio, Scalar};

pub const RL_VERSION: &str = "weaver-rl/1";
pub const DEFAULT_ADVANTAGE_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("trajectory {index} of group {group} has no reward")]
    Unrewarded { group: usize, index: usize },
    #[error("group {0} is inconsistent: trajectories, rewards and advantages differ in length")]
    Ragged(usize),
    #[error("weights must be nonnegative")]
    NegativeWeight,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Component weights, stored exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Weights {
    pub corr: Rational64,
    pub format: Rational64,
    pub tool: Rational64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            corr: Rational64::new(7, 10),
            format: Rational64::new(2, 10),
            tool: Rational64::new(1, 10),
        }
    }
}

impl Weights {
    pub fn new(corr: Rational64, format: Rational64, tool: Rational64) -> Result<Self, RewardError> {
        if corr < Rational64::zero() || format < Rational64::zero() || tool < Rational64::zero() {
            return Err(RewardError::NegativeWeight);
        }
        Ok(Self { corr, format, tool })
    }

    pub fn as_f64(&self) -> [f64; 3] {
        [self.corr, self.format, self.tool].map(<Rational64 as Scalar>::to_f64)
    }
}

#[derive(Serialize, Deserialize)]
struct WeightsRepr {
    corr: f64,
    format: f64,
    tool: f64,
}

/// The shortest decimal that round-trips a float, read back exactly.
fn ratio_of(x: f64) -> Option<Rational64> {
    parse_decimal_ratio(&format!("{x:e}"))
}

impl Serialize for Weights {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let [corr, format, tool] = self.as_f64();
        WeightsRepr { corr, format, tool }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Weights {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = WeightsRepr::deserialize(d)?;
        let conv = |x: f64| ratio_of(x).ok_or_else(|| serde::de::Error::custom(format!("weight {x} not representable")));
        Ok(Self {
            corr: conv(r.corr)?,
            format: conv(r.format)?,
            tool: conv(r.tool)?,
        })
    }
}

/// Per-trajectory reward components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown<S> {
    pub r_corr: u8,
    pub r_format: u8,
    pub r_tool: u8,
    pub weights: Weights,
    pub total: S,
}

impl<S: Scalar> RewardBreakdown<S> {
    /// Applies the gating rules: the tool term needs a correct answer, and
    /// a correct answer needs a well-formed answer block. Returns `None`
    /// for the unreachable state `correct && !formatted`.
    pub fn from_components(correct: bool, formatted: bool, tool_called: bool, weights: Weights) -> Option<Self> {
        if correct && !formatted {
            return None;
        }
        let bit = |b: bool| if b { Rational64::from_integer(1) } else { Rational64::zero() };
        let r_tool = tool_called && correct;
        let exact = weights.corr * bit(correct) + weights.format * bit(formatted) + weights.tool * bit(r_tool);
        Some(Self {
            r_corr: correct as u8,
            r_format: formatted as u8,
            r_tool: r_tool as u8,
            weights,
            total: S::from_ratio(exact),
        })
    }
}

/// Scores a finished trajectory against its question.
pub fn compute_reward<S: Scalar>(traj: &Trajectory, question: &Question, weights: Weights) -> RewardBreakdown<S> {
    let formatted = traj
        .steps
        .iter()
        .any(|s| parse_response(&s.response_text).format_ok);
    let tool_called = traj
        .steps
        .iter()
        .any(|s| parse_all_tool_calls(&s.response_text).iter().any(Result::is_ok));
    let correct = formatted
        && traj
            .final_answer
            .as_deref()
            .is_some_and(|a| is_correct(&extract_answer(a, question), question));
    RewardBreakdown::from_components(correct, formatted, tool_called, weights)
        .expect("correctness implies formatting by construction")
}

/// `a_i = (r_i - mean) / (std + eps)` with population std; a group whose
/// rewards are all equal gets exact zeros.
pub fn group_advantages<F: Float>(rewards: &[F], eps: F) -> Result<Vec<F>, RewardError> {
    if rewards.len() < 2 {
        return Err(RewardError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![F::zero(); rewards.len()]);
    }
    let n = F::from(rewards.len()).expect("group size fits the float type");
    let mean = rewards.iter().fold(F::zero(), |acc, &r| acc + r) / n;
    let var = rewards
        .iter()
        .fold(F::zero(), |acc, &r| acc + (r - mean) * (r - mean))
        / n;
    let denom = var.sqrt() + eps;
    Ok(rewards.iter().map(|&r| (r - mean) / denom).collect())
}

/// `G` rollouts of one task with their rewards and advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub task_id: String,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    /// Collects rewards from already-scored trajectories and normalizes them.
    pub fn from_trajectories(task_id: impl Into<String>, trajectories: Vec<Trajectory>, eps: f64) -> Result<Self, RewardError> {
        let mut rewards = Vec::with_capacity(trajectories.len());
        for (index, t) in trajectories.iter().enumerate() {
            let r = t.reward.as_ref().ok_or(RewardError::Unrewarded { group: 0, index })?;
            rewards.push(r.total);
        }
        let advantages = group_advantages(&rewards, eps)?;
        Ok(Self {
            task_id: task_id.into(),
            trajectories,
            rewards,
            advantages,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRef {
    pub task_id: String,
    pub group: usize,
    pub member: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlRecord {
    pub version: String,
    pub weights: Weights,
    pub trajectory: TrajectoryRef,
    pub reward: RewardBreakdown<f64>,
    pub advantage: f64,
    pub config: Value,
}

/// Writes one record per trajectory. `config` is the snapshot echoed into
/// every record (it should carry `kl_loss_coef`).
pub fn export_rl_batch(groups: &[RolloutGroup], config: &Value, path: &Path) -> Result<usize, RewardError> {
    let mut records = Vec::new();
    for (g, group) in groups.iter().enumerate() {
        if group.trajectories.len() != group.advantages.len() || group.rewards.len() != group.advantages.len() {
            return Err(RewardError::Ragged(g));
        }
        for (m, (traj, &advantage)) in group.trajectories.iter().zip(&group.advantages).enumerate() {
            let reward = traj.reward.ok_or(RewardError::Unrewarded { group: g, index: m })?;
            records.push(RlRecord {
                version: RL_VERSION.into(),
                weights: reward.weights,
                trajectory: TrajectoryRef {
                    task_id: traj.task_id.clone(),
                    group: g,
                    member: m,
                    seed: traj.seed,
                },
                reward,
                advantage,
                config: config.clone(),
            });
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    for r in &records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(records.len())
}
