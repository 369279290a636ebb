//! The multi-turn episode loop, grouped rollouts, and batch execution.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::history::{HistoryError, HistoryState, Question, StepRecord, TokenCosts, VideoCatalog, VideoMeta};
use crate::policy::{default_system_prompt, PolicyBackend, PolicyProvider, PolicyRequest, SamplingParams};
use crate::protocol::parse_response;
use crate::reward::{compute_reward, RewardError, RolloutGroup, Weights, DEFAULT_ADVANTAGE_EPS};
use crate::seed::mix;
use crate::synthworld::{Task, TemplateKind};
use crate::toolkit::Toolkit;
use crate::Reward;

pub const TRAJECTORY_VERSION: &str = "weaver-traj/1";
pub const FLAG_TRUNCATED: &str = "response truncated to max_new_tokens";

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("invalid rollout config: {0}")]
    Config(String),
    #[error("every episode in the group failed: {0}")]
    GroupFailed(String),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    pub n_init_frames: usize,
    pub max_turns: usize,
    pub max_prompt_tokens: usize,
    pub max_response_tokens: usize,
    pub group_size: usize,
    pub sampling: SamplingParams,
    pub seed: u64,
    pub token_costs: TokenCosts,
    pub weights: Weights,
    pub advantage_eps: f64,
    pub system_prompt: String,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            n_init_frames: 128,
            max_turns: 10,
            max_prompt_tokens: 8192,
            max_response_tokens: 20480,
            group_size: 8,
            sampling: SamplingParams::default(),
            seed: 0,
            token_costs: TokenCosts::default(),
            weights: Weights::default(),
            advantage_eps: DEFAULT_ADVANTAGE_EPS,
            system_prompt: default_system_prompt(),
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<(), RolloutError> {
        let positive = [
            ("n_init_frames", self.n_init_frames),
            ("max_turns", self.max_turns),
            ("max_prompt_tokens", self.max_prompt_tokens),
            ("max_response_tokens", self.max_response_tokens),
            ("group_size", self.group_size),
            ("max_new_tokens", self.sampling.max_new_tokens),
            ("tokens_per_frame", self.token_costs.tokens_per_frame),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(RolloutError::Config(format!("{name} must be positive")));
        }
        if self.sampling.max_new_tokens > self.max_response_tokens {
            return Err(RolloutError::Config(format!(
                "max_new_tokens {} exceeds max_response_tokens {}",
                self.sampling.max_new_tokens, self.max_response_tokens
            )));
        }
        if !(self.advantage_eps >= 0.0) {
            return Err(RolloutError::Config("advantage_eps must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Answered,
    MaxTurns,
    ContextOverflow,
    BackendError,
}

impl StopReason {
    pub const ALL: [StopReason; 4] = [
        StopReason::Answered,
        StopReason::MaxTurns,
        StopReason::ContextOverflow,
        StopReason::BackendError,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Answered => "answered",
            StopReason::MaxTurns => "max_turns",
            StopReason::ContextOverflow => "context_overflow",
            StopReason::BackendError => "backend_error",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    /// Dispatched tool calls, failed ones included.
    pub n_tool_calls: usize,
    pub per_tool: BTreeMap<String, usize>,
    pub n_turns: usize,
}

impl TrajectoryStats {
    pub fn recount(steps: &[StepRecord]) -> Self {
        let mut stats = Self {
            n_turns: steps.len(),
            ..Self::default()
        };
        for result in steps.iter().filter_map(|s| s.tool_result.as_ref()) {
            stats.n_tool_calls += 1;
            *stats.per_tool.entry(result.tool_name.clone()).or_default() += 1;
        }
        stats
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub version: String,
    pub task_id: String,
    pub template: Option<TemplateKind>,
    pub question: Question,
    pub video_id: String,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub final_answer: Option<String>,
    pub stop_reason: StopReason,
    pub error: Option<String>,
    pub reward: Option<Reward>,
    pub stats: TrajectoryStats,
}

impl Trajectory {
    /// A placeholder record for a task that could not be run at all.
    pub fn failed(task: &Task, seed: u64, error: impl Into<String>) -> Self {
        Self {
            version: TRAJECTORY_VERSION.into(),
            task_id: task.task_id.clone(),
            template: task.template.as_ref().map(|t| t.kind()),
            question: task.question.clone(),
            video_id: task.video_id.clone(),
            seed,
            steps: Vec::new(),
            final_answer: None,
            stop_reason: StopReason::BackendError,
            error: Some(error.into()),
            reward: None,
            stats: TrajectoryStats::default(),
        }
    }

    pub fn is_correct(&self) -> bool {
        self.reward.is_some_and(|r| r.r_corr == 1)
    }

    pub fn check(&self, max_turns: usize) -> Result<(), String> {
        if (self.stop_reason == StopReason::Answered) != self.final_answer.is_some() {
            return Err("answered iff final_answer present".into());
        }
        if self.steps.len() > max_turns {
            return Err(format!("{} steps exceed max_turns {max_turns}", self.steps.len()));
        }
        if self.stop_reason == StopReason::Answered
            && self.steps.last().and_then(|s| s.answer.as_ref()) != self.final_answer.as_ref()
        {
            return Err("answered trajectory must end with its answer step".into());
        }
        if self.stats != TrajectoryStats::recount(&self.steps) {
            return Err("stats disagree with steps".into());
        }
        for s in &self.steps {
            s.check()?;
        }
        Ok(())
    }
}

fn truncate_to_tokens(text: &mut String, max_tokens: usize) -> bool {
    let max_bytes = max_tokens.saturating_mul(4);
    if text.len() <= max_bytes {
        return false;
    }
    let mut cut = max_bytes;
    while !text.is_char_boundary(cut) {
        cut -= 1;
    }
    text.truncate(cut);
    true
}

/// Runs one episode to an answer or a limit.
pub fn run_episode(
    task: &Task,
    video: &VideoMeta,
    policy: &dyn PolicyBackend,
    toolkit: &Toolkit,
    config: &RolloutConfig,
    seed: u64,
) -> Trajectory {
    let mut traj = Trajectory::failed(task, seed, "");
    traj.error = None;
    let finish = |mut traj: Trajectory, reason: StopReason, error: Option<String>| {
        traj.stop_reason = reason;
        traj.error = error;
        traj.stats = TrajectoryStats::recount(&traj.steps);
        traj.reward = Some(compute_reward(&traj, &task.question, config.weights));
        traj
    };
    if let Err(e) = config.validate() {
        return finish(traj, StopReason::BackendError, Some(e.to_string()));
    }
    let costs = &config.token_costs;
    let mut history = match HistoryState::init(&task.question, video, config.n_init_frames, &config.system_prompt, costs) {
        Ok(h) => h,
        Err(e) => return finish(traj, StopReason::BackendError, Some(e.to_string())),
    };
    let sampling = SamplingParams { seed, ..config.sampling };
    for turn in 0..config.max_turns {
        let context = match history.assemble_context(config.max_prompt_tokens) {
            Ok(c) => c,
            Err(e @ HistoryError::Overflow { .. }) => {
                return finish(traj, StopReason::ContextOverflow, Some(e.to_string()))
            }
            Err(e) => return finish(traj, StopReason::BackendError, Some(e.to_string())),
        };
        let request = PolicyRequest {
            context: &context,
            sampling,
            turn,
        };
        let mut response = match request
            .validate(config.max_response_tokens)
            .and_then(|_| policy.next_response(&request))
        {
            Ok(r) => r,
            Err(e) => return finish(traj, StopReason::BackendError, Some(e.to_string())),
        };
        let truncated = truncate_to_tokens(&mut response, sampling.max_new_tokens);
        let parsed = parse_response(&response);
        let mut flags = parsed.diagnostics.clone();
        if truncated {
            flags.push(FLAG_TRUNCATED.into());
        }
        let mut step = StepRecord {
            response_text: response,
            tool_call: parsed.tool_call.clone(),
            tool_result: None,
            answer: parsed.answer_span.clone(),
            protocol_flags: flags,
            context_tokens: context.total_tokens,
            evicted_segments: context.evicted.len(),
        };
        if let Some(answer) = parsed.answer_span {
            traj.steps.push(step);
            traj.final_answer = Some(answer);
            return finish(traj, StopReason::Answered, None);
        }
        if let Some(call) = parsed.action_call() {
            step.tool_result = Some(toolkit.dispatch(call, video));
        }
        history = history.append_step(&step, costs);
        traj.steps.push(step);
    }
    finish(traj, StopReason::MaxTurns, None)
}

/// `group_size` episodes of one task with seeds `mix(config.seed, i)`.
pub fn run_group(
    task: &Task,
    video: &VideoMeta,
    policy: &dyn PolicyBackend,
    toolkit: &Toolkit,
    config: &RolloutConfig,
) -> Result<RolloutGroup, RolloutError> {
    config.validate()?;
    if config.group_size < 2 {
        return Err(RolloutError::Config("group_size must be at least 2".into()));
    }
    let trajectories: Vec<Trajectory> = (0..config.group_size)
        .into_par_iter()
        .map(|i| run_episode(task, video, policy, toolkit, config, mix(config.seed, i as u64)))
        .collect();
    if trajectories.iter().all(|t| t.stop_reason == StopReason::BackendError) {
        let first = trajectories[0].error.clone().unwrap_or_default();
        return Err(RolloutError::GroupFailed(first));
    }
    Ok(RolloutGroup::from_trajectories(
        task.task_id.clone(),
        trajectories,
        config.advantage_eps,
    )?)
}

/// A task that could not be run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFailure {
    pub index: usize,
    pub task_id: String,
    pub error: String,
}

fn pool(parallelism: usize) -> Result<rayon::ThreadPool, RolloutError> {
    if parallelism == 0 {
        return Err(RolloutError::Config("parallelism must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| RolloutError::Config(e.to_string()))
}

fn resolve(
    index: usize,
    task: &Task,
    catalog: &dyn VideoCatalog,
    provider: &dyn PolicyProvider,
) -> Result<(VideoMeta, std::sync::Arc<dyn PolicyBackend>), TaskFailure> {
    let fail = |error: String| TaskFailure {
        index,
        task_id: task.task_id.clone(),
        error,
    };
    let video = catalog
        .video_meta(&task.video_id)
        .ok_or_else(|| fail(format!("unknown video {:?}", task.video_id)))?;
    let policy = provider.policy_for(task).map_err(|e| fail(e.to_string()))?;
    Ok((video, policy))
}

/// One episode per task, seeded by `mix(config.seed, index)`. Results keep
/// input order and do not depend on `parallelism`.
pub fn run_batch(
    tasks: &[Task],
    catalog: &dyn VideoCatalog,
    provider: &dyn PolicyProvider,
    toolkit: &Toolkit,
    config: &RolloutConfig,
    parallelism: usize,
) -> Result<Vec<Result<Trajectory, TaskFailure>>, RolloutError> {
    config.validate()?;
    Ok(pool(parallelism)?.install(|| {
        tasks
            .par_iter()
            .enumerate()
            .map(|(i, task)| {
                let (video, policy) = resolve(i, task, catalog, provider)?;
                Ok(run_episode(task, &video, policy.as_ref(), toolkit, config, mix(config.seed, i as u64)))
            })
            .collect()
    }))
}

/// One group per task; the group seed is `mix(config.seed, index)`.
pub fn run_group_batch(
    tasks: &[Task],
    catalog: &dyn VideoCatalog,
    provider: &dyn PolicyProvider,
    toolkit: &Toolkit,
    config: &RolloutConfig,
    parallelism: usize,
) -> Result<Vec<Result<RolloutGroup, TaskFailure>>, RolloutError> {
    config.validate()?;
    Ok(pool(parallelism)?.install(|| {
        tasks
            .par_iter()
            .enumerate()
            .map(|(i, task)| {
                let (video, policy) = resolve(i, task, catalog, provider)?;
                let cfg = RolloutConfig {
                    seed: mix(config.seed, i as u64),
                    ..config.clone()
                };
                run_group(task, &video, policy.as_ref(), toolkit, &cfg).map_err(|e| TaskFailure {
                    index: i,
                    task_id: task.task_id.clone(),
                    error: e.to_string(),
                })
            })
            .collect()
    }))
}

/// Flattens batch results into trajectory records; failures become
/// `backend_error` records carrying the message.
pub fn batch_records(tasks: &[Task], results: Vec<Result<Trajectory, TaskFailure>>, config: &RolloutConfig) -> Vec<Trajectory> {
    results
        .into_iter()
        .map(|r| match r {
            Ok(t) => t,
            Err(f) => Trajectory::failed(&tasks[f.index], mix(config.seed, f.index as u64), f.error),
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<usize, RolloutError> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(items.len())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RolloutError> {
    let file = File::open(path)?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| RolloutError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(items)
}
