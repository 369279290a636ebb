//! Dataset construction: filter, rewrite with pre-extracted tool results,
//! refine, and export SFT records and the RL question pool.
//!
//! Every stage is a map over independent items; partitions are exact, so
//! each input item ends up in exactly one of `discarded`, `sft`, `rl_pool`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::history::{
    initial_clip, Clip, HistoryState, Question, StepRecord, VideoCatalog, VideoMeta,
};
use crate::policy::{
    construct_prompt, PolicyBackend, PolicyProvider, PolicyRequest, CONSTRUCT_PROMPT_TEMPLATE,
};
use crate::protocol::{
    extract_answer, is_correct, parse_all_tool_calls, parse_response, parse_tool_envelope, render_tool_result,
    split_after_tool_calls, strip_answers, DIAG_UNPARSEABLE,
};
use crate::rollout::RolloutConfig;
use crate::synthworld::{Task, TaskTemplate};
use crate::toolkit::{ToolResult, ToolStatus, Toolkit};

pub const SFT_VERSION: &str = "weaver-sft/1";
pub const RL_POOL_VERSION: &str = "weaver-rlpool/1";
pub const DEFAULT_SFT_FRAMES: usize = 64;

pub const FLAG_NO_CALLS: &str = "rewrite contains no tool call";
pub const FLAG_INVALID_CALL: &str = "rewrite contains an invalid tool call";

#[derive(Debug, Error)]
pub enum DatapipeError {
    #[error("record {item_id}: {reason}")]
    InvalidRecord { item_id: String, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A question with its gold answer and a text-only chain of thought.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceItem {
    pub item_id: String,
    pub video_id: String,
    pub question: Question,
    pub textual_cot: String,
    /// Generating template, for synthetic items.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<TaskTemplate>,
}

impl SourceItem {
    pub fn validate(&self) -> Result<(), String> {
        if self.question.gold.trim().is_empty() {
            return Err("gold is empty".into());
        }
        self.question.validate()
    }

    /// A synthetic source item with a short templated chain of thought.
    pub fn from_task(task: &Task) -> Self {
        let cot = match &task.template {
            Some(TaskTemplate::CountEvent { label }) => {
                format!("I watch the whole video and count each time \"{label}\" happens.")
            }
            Some(TaskTemplate::SpanOfEvent { label }) => {
                format!("I look for the moment \"{label}\" happens and read off its start and end.")
            }
            Some(TaskTemplate::OrderEvents { labels }) => format!(
                "I find when each of {} happens and sort them by time.",
                labels.join(", ")
            ),
            Some(TaskTemplate::ObjectAtTime { time_s }) => {
                format!("I look at the frame at {time_s:.1} s and check which listed object is there.")
            }
            None => "I look at the video and answer.".into(),
        };
        Self {
            item_id: task.task_id.clone(),
            video_id: task.video_id.clone(),
            question: task.question.clone(),
            textual_cot: cot,
            template: task.template.clone(),
        }
    }

    /// The item as a task, the unit policy providers see.
    pub fn as_task(&self) -> Task {
        Task {
            task_id: self.item_id.clone(),
            video_id: self.video_id.clone(),
            template: self.template.clone(),
            question: self.question.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeptItem {
    pub item: SourceItem,
    /// Why the item was kept without a verdict, if it was.
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<KeptItem>,
    pub discarded: Vec<SourceItem>,
}

/// One direct answer from `policy` over the question and `n_frames` frames.
fn direct_answer(
    item: &SourceItem,
    video: &VideoMeta,
    policy: &dyn PolicyBackend,
    config: &RolloutConfig,
    n_frames: usize,
) -> Result<bool, String> {
    let history = HistoryState::init(&item.question, video, n_frames, &config.system_prompt, &config.token_costs)
        .map_err(|e| e.to_string())?;
    answer_from(&history, &item.question, policy, config, 0)
}

fn answer_from(
    history: &HistoryState,
    question: &Question,
    policy: &dyn PolicyBackend,
    config: &RolloutConfig,
    turn: usize,
) -> Result<bool, String> {
    let context = history
        .assemble_context(config.max_prompt_tokens)
        .map_err(|e| e.to_string())?;
    let request = PolicyRequest {
        context: &context,
        sampling: config.sampling,
        turn,
    };
    request
        .validate(config.max_response_tokens)
        .map_err(|e| e.to_string())?;
    let response = policy.next_response(&request).map_err(|e| e.to_string())?;
    let parsed = parse_response(&response);
    Ok(parsed
        .answer_span
        .is_some_and(|a| is_correct(&extract_answer(&a, question), question)))
}

/// Keeps the items the direct answerer gets wrong. Items that cannot be
/// judged (backend failure, unknown video) are kept with a diagnostic.
pub fn stage1_filter(
    items: &[SourceItem],
    catalog: &dyn VideoCatalog,
    answerer: &dyn PolicyProvider,
    config: &RolloutConfig,
    n_frames: usize,
) -> FilterOutcome {
    let verdicts: Vec<Result<bool, String>> = items
        .par_iter()
        .map(|item| {
            item.validate()?;
            let video = catalog
                .video_meta(&item.video_id)
                .ok_or_else(|| format!("unknown video {:?}", item.video_id))?;
            let policy = answerer.policy_for(&item.as_task()).map_err(|e| e.to_string())?;
            direct_answer(item, &video, policy.as_ref(), config, n_frames)
        })
        .collect();
    let mut out = FilterOutcome::default();
    for (item, verdict) in items.iter().zip(verdicts) {
        match verdict {
            Ok(true) => out.discarded.push(item.clone()),
            Ok(false) => out.kept.push(KeptItem {
                item: item.clone(),
                diagnostic: None,
            }),
            Err(e) => out.kept.push(KeptItem {
                item: item.clone(),
                diagnostic: Some(e),
            }),
        }
    }
    out
}

/// A rewritten trajectory with one executed result per tool-call block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDraft {
    pub item: SourceItem,
    /// Model text, split after each tool-call block; answers removed. The
    /// last piece is the text after the final call.
    pub steps: Vec<String>,
    /// `results[i]` answers the call closing `steps[i]`.
    pub results: Vec<ToolResult>,
    pub flags: Vec<String>,
}

impl TrajectoryDraft {
    pub fn is_flagged(&self) -> bool {
        !self.flags.is_empty()
    }

    pub fn n_calls(&self) -> usize {
        self.results.len()
    }
}

/// Asks the rewriter for a tool-augmented version of the item's chain of
/// thought, then executes every call in it.
pub fn stage2_rewrite(
    item: &SourceItem,
    video: &VideoMeta,
    rewriter: &dyn PolicyBackend,
    toolkit: &Toolkit,
    config: &RolloutConfig,
) -> TrajectoryDraft {
    let mut draft = TrajectoryDraft {
        item: item.clone(),
        steps: Vec::new(),
        results: Vec::new(),
        flags: Vec::new(),
    };
    let prompt = construct_prompt(CONSTRUCT_PROMPT_TEMPLATE, &item.question.render(), &item.textual_cot);
    let response = HistoryState::init(&item.question, video, config.n_init_frames, &prompt, &config.token_costs)
        .map_err(|e| e.to_string())
        .and_then(|h| h.assemble_context(config.max_prompt_tokens).map_err(|e| e.to_string()))
        .and_then(|context| {
            let request = PolicyRequest {
                context: &context,
                sampling: config.sampling,
                turn: 0,
            };
            rewriter.next_response(&request).map_err(|e| e.to_string())
        });
    let text = match response {
        Ok(t) => strip_answers(&t),
        Err(e) => {
            draft.flags.push(format!("rewriter failed: {e}"));
            return draft;
        }
    };
    let calls = parse_all_tool_calls(&text);
    draft.steps = split_after_tool_calls(&text).into_iter().map(str::to_string).collect();
    for call in &calls {
        let result = match call {
            Ok(call) => toolkit.dispatch(call, video),
            Err(reason) => ToolResult::invalid_args("unknown", &format!("{DIAG_UNPARSEABLE}: {reason}")),
        };
        draft.results.push(result);
    }
    if calls.is_empty() {
        draft.flags.push(FLAG_NO_CALLS.into());
    }
    if draft.results.iter().any(|r| r.status == ToolStatus::InvalidArgs) {
        draft.flags.push(FLAG_INVALID_CALL.into());
    }
    draft
}

/// One unit of supervised text: model-authored, or a tool result with its
/// returned clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SftSegment {
    Model { text: String },
    Tool { text: String, clip: Option<Clip> },
}

/// A correctly answered draft, before export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSample {
    pub item: SourceItem,
    pub video: VideoMeta,
    pub segments: Vec<SftSegment>,
}

impl SftSample {
    pub fn tool_names(&self) -> Vec<String> {
        segment_tool_names(&self.segments)
    }
}

fn segment_tool_names(segments: &[SftSegment]) -> Vec<String> {
    segments
        .iter()
        .filter_map(|s| match s {
            SftSegment::Tool { text, .. } => parse_tool_envelope(text).map(|e| e.tool),
            SftSegment::Model { .. } => None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlPoolRecord {
    pub version: String,
    pub item_id: String,
    pub video_id: String,
    pub question: Question,
}

impl RlPoolRecord {
    pub fn from_item(item: &SourceItem) -> Self {
        Self {
            version: RL_POOL_VERSION.into(),
            item_id: item.item_id.clone(),
            video_id: item.video_id.clone(),
            question: item.question.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Refined {
    Sft(SftSample),
    RlPool(RlPoolRecord),
}

fn draft_history(draft: &TrajectoryDraft, video: &VideoMeta, config: &RolloutConfig) -> Result<HistoryState, String> {
    let mut history = HistoryState::init(
        &draft.item.question,
        video,
        config.n_init_frames,
        &config.system_prompt,
        &config.token_costs,
    )
    .map_err(|e| e.to_string())?;
    for (i, text) in draft.steps.iter().enumerate() {
        let step = match draft.results.get(i) {
            Some(result) => StepRecord {
                tool_call: parse_response(text).action_call().cloned(),
                tool_result: Some(result.clone()),
                ..StepRecord::text_only(text.as_str())
            },
            None if text.trim().is_empty() => continue,
            None => StepRecord::text_only(text.as_str()),
        };
        history = history.append_step(&step, &config.token_costs);
    }
    Ok(history)
}

/// Has the answerer finish the draft without seeing the gold answer. A
/// correct finish becomes an SFT sample; anything else goes to the pool.
pub fn stage3_refine(
    draft: &TrajectoryDraft,
    video: &VideoMeta,
    answerer: &dyn PolicyBackend,
    config: &RolloutConfig,
) -> Refined {
    let pool = || Refined::RlPool(RlPoolRecord::from_item(&draft.item));
    if draft.is_flagged() {
        return pool();
    }
    let Ok(history) = draft_history(draft, video, config) else {
        return pool();
    };
    let Ok(context) = history.assemble_context(config.max_prompt_tokens) else {
        return pool();
    };
    let request = PolicyRequest {
        context: &context,
        sampling: config.sampling,
        turn: draft.steps.len(),
    };
    let Ok(response) = request
        .validate(config.max_response_tokens)
        .map_err(|e| e.to_string())
        .and_then(|_| answerer.next_response(&request).map_err(|e| e.to_string()))
    else {
        return pool();
    };
    let parsed = parse_response(&response);
    let question = &draft.item.question;
    let correct = parsed
        .answer_span
        .as_ref()
        .is_some_and(|a| is_correct(&extract_answer(a, question), question));
    if !correct {
        return pool();
    }
    let mut segments = Vec::new();
    for (i, text) in draft.steps.iter().enumerate() {
        if let Some(result) = draft.results.get(i) {
            segments.push(SftSegment::Model { text: text.clone() });
            segments.push(SftSegment::Tool {
                text: render_tool_result(result),
                clip: result.clip.clone(),
            });
        } else if !text.trim().is_empty() {
            segments.push(SftSegment::Model { text: text.clone() });
        }
    }
    segments.push(SftSegment::Model { text: response });
    Refined::Sft(SftSample {
        item: draft.item.clone(),
        video: video.clone(),
        segments,
    })
}

/// The three stages over a batch. Each item lands in exactly one of the
/// three outputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineOutput {
    pub discarded: Vec<SourceItem>,
    pub drafts: Vec<TrajectoryDraft>,
    pub sft: Vec<SftSample>,
    pub rl_pool: Vec<RlPoolRecord>,
    /// `(item_id, message)` for items kept without a verdict.
    pub diagnostics: Vec<(String, String)>,
}

/// Backends for the three stages.
#[derive(Clone)]
pub struct StageBackends {
    pub filter: Arc<dyn PolicyProvider>,
    pub rewriter: Arc<dyn PolicyProvider>,
    pub answerer: Arc<dyn PolicyProvider>,
}

pub fn run_pipeline(
    items: &[SourceItem],
    catalog: &dyn VideoCatalog,
    backends: &StageBackends,
    toolkit: &Toolkit,
    config: &RolloutConfig,
    filter_frames: usize,
) -> PipelineOutput {
    let stage1 = stage1_filter(items, catalog, backends.filter.as_ref(), config, filter_frames);
    let mut out = PipelineOutput {
        discarded: stage1.discarded,
        ..PipelineOutput::default()
    };
    let processed: Vec<(Option<TrajectoryDraft>, Refined)> = stage1
        .kept
        .par_iter()
        .map(|kept| {
            let item = &kept.item;
            let pool = || (None, Refined::RlPool(RlPoolRecord::from_item(item)));
            let Some(video) = catalog.video_meta(&item.video_id) else {
                return pool();
            };
            let task = item.as_task();
            let (Ok(rewriter), Ok(answerer)) = (backends.rewriter.policy_for(&task), backends.answerer.policy_for(&task))
            else {
                return pool();
            };
            let draft = stage2_rewrite(item, &video, rewriter.as_ref(), toolkit, config);
            let refined = stage3_refine(&draft, &video, answerer.as_ref(), config);
            (Some(draft), refined)
        })
        .collect();
    for (kept, (draft, refined)) in stage1.kept.iter().zip(processed) {
        if let Some(d) = &kept.diagnostic {
            out.diagnostics.push((kept.item.item_id.clone(), d.clone()));
        }
        out.drafts.extend(draft);
        match refined {
            Refined::Sft(s) => out.sft.push(s),
            Refined::RlPool(r) => out.rl_pool.push(r),
        }
    }
    out
}

/// Exported SFT record. `mask[i]` says whether `segments[i]` is supervised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub version: String,
    pub item_id: String,
    pub video_id: String,
    pub question: Question,
    pub initial_clip: Clip,
    pub segments: Vec<SftSegment>,
    pub mask: Vec<u8>,
}

impl SftRecord {
    pub fn from_sample(sample: &SftSample, n_frames: usize) -> Result<Self, DatapipeError> {
        let invalid = |reason: String| DatapipeError::InvalidRecord {
            item_id: sample.item.item_id.clone(),
            reason,
        };
        let initial_clip = initial_clip(&sample.video, n_frames).map_err(|e| invalid(e.to_string()))?;
        let mask = sample
            .segments
            .iter()
            .map(|s| matches!(s, SftSegment::Model { .. }) as u8)
            .collect();
        let record = Self {
            version: SFT_VERSION.into(),
            item_id: sample.item.item_id.clone(),
            video_id: sample.video.video_id.clone(),
            question: sample.item.question.clone(),
            initial_clip,
            segments: sample.segments.clone(),
            mask,
        };
        record.check().map_err(invalid)?;
        Ok(record)
    }

    /// Masks cover model text only, one entry per segment.
    pub fn check(&self) -> Result<(), String> {
        if self.mask.len() != self.segments.len() {
            return Err(format!("{} mask entries for {} segments", self.mask.len(), self.segments.len()));
        }
        for (m, s) in self.mask.iter().zip(&self.segments) {
            let model = matches!(s, SftSegment::Model { .. });
            if *m > 1 || (*m == 1) != model {
                return Err("mask must cover exactly the model segments".into());
            }
        }
        Ok(())
    }

    pub fn n_calls(&self) -> usize {
        self.segments.iter().filter(|s| matches!(s, SftSegment::Tool { .. })).count()
    }

    pub fn tool_names(&self) -> Vec<String> {
        segment_tool_names(&self.segments)
    }
}

fn write_lines<T: Serialize>(records: &[T], path: &Path) -> Result<usize, DatapipeError> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(records.len())
}

pub fn export_sft(samples: &[SftSample], path: &Path, n_frames: usize) -> Result<usize, DatapipeError> {
    let records = samples
        .iter()
        .map(|s| SftRecord::from_sample(s, n_frames))
        .collect::<Result<Vec<_>, _>>()?;
    write_lines(&records, path)
}

pub fn export_rl(pool: &[RlPoolRecord], path: &Path) -> Result<usize, DatapipeError> {
    write_lines(pool, path)
}

/// Tool usage over a dataset: how often each tool appears and how many
/// calls each sample makes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub n_samples: usize,
    pub n_calls: usize,
    pub per_tool_count: BTreeMap<String, usize>,
    pub per_tool_fraction: BTreeMap<String, f64>,
    /// calls per sample -> number of samples
    pub calls_per_sample: BTreeMap<usize, usize>,
    pub mean_calls: f64,
}

/// Stats from the tool names each sample called.
pub fn pipeline_stats<I, S>(samples: I) -> PipelineStats
where
    I: IntoIterator<Item = Vec<S>>,
    S: Into<String>,
{
    let mut stats = PipelineStats::default();
    for tools in samples {
        stats.n_samples += 1;
        *stats.calls_per_sample.entry(tools.len()).or_default() += 1;
        for t in tools {
            stats.n_calls += 1;
            *stats.per_tool_count.entry(t.into()).or_default() += 1;
        }
    }
    if stats.n_calls > 0 {
        stats.per_tool_fraction = stats
            .per_tool_count
            .iter()
            .map(|(k, &v)| (k.clone(), v as f64 / stats.n_calls as f64))
            .collect();
    }
    if stats.n_samples > 0 {
        stats.mean_calls = stats.n_calls as f64 / stats.n_samples as f64;
    }
    stats
}

pub fn draft_tool_names(draft: &TrajectoryDraft) -> Vec<String> {
    draft.results.iter().map(|r| r.tool_name.clone()).collect()
}
