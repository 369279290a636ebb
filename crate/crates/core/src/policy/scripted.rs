//! Deterministic scripted policies.
//!
//! A plan is a list of response templates, one per turn. Templates may
//! interpolate what earlier tool results reported, read back from the
//! tool envelopes in the context:
//!
//! - `{tool[N].note.KEY}`, `{tool[N].status}`, `{tool[N].name}`: the N-th
//!   (1-based) tool result of the episode.
//! - `{order[1,2,3]}`: the `query` fields of those results, sorted by the
//!   start of their `span`, joined with `" -> "`.
//! - `{option:EXPR}`: the letter of the option whose text equals EXPR. When
//!   EXPR cannot be resolved the policy guesses a letter from its seed.
//! - `{guess}`: a seeded guess.
//!
//! A `{` not followed by one of these forms is copied verbatim, so JSON
//! payloads need no escaping. An unresolved plain expression renders as
//! `unknown`.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::{json, Map, Value};

use super::{PolicyBackend, PolicyError, PolicyProvider, PolicyRequest};
use crate::history::{option_letter, ContextView, Role, Segment};
use crate::protocol::{
    normalize_text, parse_response, parse_tool_envelope, render_tool_call, EnvelopeView, ToolCall,
    ANSWER_OPEN,
};
use crate::seed::mix;
use crate::synthworld::{Task, TaskTemplate, ORDER_SEPARATOR};
use crate::toolkit::{ToolName, ToolStatus};

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedPolicy {
    plan: Vec<String>,
    options: Vec<String>,
    /// Tool to retry with when a call comes back `invalid_args`.
    fallbacks: BTreeMap<String, String>,
}

impl ScriptedPolicy {
    /// A plan that ends with an answer.
    pub fn new(plan: Vec<String>, options: Vec<String>) -> Result<Self, PolicyError> {
        match plan.last() {
            None => Err(PolicyError::Construction("plan is empty".into())),
            Some(last) if !last.contains(ANSWER_OPEN) => Err(PolicyError::Construction(
                "final template has no <answer> block".into(),
            )),
            Some(_) => Ok(Self {
                plan,
                options,
                fallbacks: BTreeMap::new(),
            }),
        }
    }

    /// Repeats `text` forever without answering.
    pub fn looping(text: impl Into<String>) -> Self {
        Self {
            plan: vec![text.into()],
            options: Vec::new(),
            fallbacks: BTreeMap::new(),
        }
    }

    pub fn with_fallback(mut self, failed: ToolName, replacement: ToolName) -> Self {
        self.fallbacks
            .insert(failed.to_string(), replacement.to_string());
        self
    }

    pub fn plan(&self) -> &[String] {
        &self.plan
    }

    fn guess(&self, seed: u64) -> String {
        if self.options.is_empty() {
            return "A".into();
        }
        option_letter((seed % self.options.len() as u64) as usize).to_string()
    }

    /// Renders the template for `turn` given the tool results seen so far.
    pub fn render(&self, template: &str, results: &[Option<EnvelopeView>], guess_seed: u64) -> String {
        let mut out = String::with_capacity(template.len());
        let mut rest = template;
        while let Some(pos) = rest.find('{') {
            out.push_str(&rest[..pos]);
            let after = &rest[pos + 1..];
            let starts_expr = after.chars().next().is_some_and(|c| c.is_ascii_alphabetic());
            let close = after.find('}');
            match (starts_expr, close) {
                (true, Some(end)) => {
                    let inner = &after[..end];
                    match self.eval_directive(inner, results, guess_seed) {
                        Some(text) => out.push_str(&text),
                        None => {
                            out.push('{');
                            out.push_str(inner);
                            out.push('}');
                        }
                    }
                    rest = &after[end + 1..];
                }
                _ => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }

    /// `None` means "not a directive"; unresolved directives render a fallback.
    fn eval_directive(
        &self,
        inner: &str,
        results: &[Option<EnvelopeView>],
        guess_seed: u64,
    ) -> Option<String> {
        if inner == "guess" {
            return Some(self.guess(guess_seed));
        }
        if let Some(expr) = inner.strip_prefix("option:") {
            let value = eval_expr(expr.trim(), results)?;
            let letter = value.and_then(|v| {
                let v = normalize_text(&v);
                self.options
                    .iter()
                    .position(|o| normalize_text(o) == v)
                    .map(|i| option_letter(i).to_string())
            });
            return Some(letter.unwrap_or_else(|| self.guess(guess_seed)));
        }
        eval_expr(inner, results).map(|v| v.unwrap_or_else(|| "unknown".into()))
    }
}

/// Outer `None`: not an expression. Inner `None`: expression unresolved.
fn eval_expr(expr: &str, results: &[Option<EnvelopeView>]) -> Option<Option<String>> {
    if let Some(list) = expr.strip_prefix("order[").and_then(|r| r.strip_suffix(']')) {
        let mut picked = Vec::new();
        for idx in list.split(',') {
            let n: usize = idx.trim().parse().ok()?;
            picked.push(n);
        }
        let mut keyed = Vec::new();
        for n in picked {
            let env = match result_at(results, n) {
                Some(env) if env.is_ok() => env,
                _ => return Some(None),
            };
            let (Some(query), Some(start)) = (env.note.get("query"), env.note.get("span").and_then(|s| span_start(s))) else {
                return Some(None);
            };
            keyed.push((start, query.clone()));
        }
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        let labels: Vec<String> = keyed.into_iter().map(|(_, q)| q).collect();
        return Some(Some(labels.join(ORDER_SEPARATOR)));
    }
    let rest = expr.strip_prefix("tool[")?;
    let (idx, field) = rest.split_once("].")?;
    let n: usize = idx.trim().parse().ok()?;
    let env = result_at(results, n);
    let value = match field {
        "status" => env.map(|e| e.status.clone()),
        "name" => env.map(|e| e.tool.clone()),
        _ => {
            let key = field.strip_prefix("note.")?;
            env.and_then(|e| e.note.get(key).cloned())
        }
    };
    Some(value)
}

fn result_at(results: &[Option<EnvelopeView>], one_based: usize) -> Option<&EnvelopeView> {
    results.get(one_based.checked_sub(1)?)?.as_ref()
}

fn span_start(text: &str) -> Option<f64> {
    let inner = text.trim().strip_prefix('[')?.strip_suffix(']')?;
    inner.split(',').next()?.trim().parse().ok()
}

/// Assistant turns visible in the context, each with the envelope that
/// followed it (if still present).
fn visible_turns(context: &ContextView) -> Vec<(String, Option<EnvelopeView>)> {
    let mut turns: Vec<(String, Option<EnvelopeView>)> = Vec::new();
    for seg in context.segments() {
        match seg {
            Segment::Text {
                role: Role::Assistant,
                text,
                ..
            } => turns.push((text.clone(), None)),
            Segment::Text {
                role: Role::Tool,
                text,
                ..
            } => {
                if let Some(last) = turns.last_mut() {
                    last.1 = parse_tool_envelope(text);
                }
            }
            Segment::Visual { caption, .. } if !caption.is_empty() => {
                if let Some(last) = turns.last_mut() {
                    last.1 = parse_tool_envelope(caption);
                }
            }
            _ => {}
        }
    }
    turns
}

impl PolicyBackend for ScriptedPolicy {
    fn next_response(&self, request: &PolicyRequest<'_>) -> Result<String, PolicyError> {
        let mut cursor = 0usize;
        let mut results: Vec<Option<EnvelopeView>> = Vec::new();
        let mut retry: Option<(String, ToolCall)> = None;
        for (text, envelope) in visible_turns(request.context) {
            let was_retry = retry.take().is_some();
            if !was_retry {
                cursor += 1;
            }
            let Some(call) = parse_response(&text).action_call().cloned() else {
                continue;
            };
            if was_retry {
                if let Some(last) = results.last_mut() {
                    *last = envelope;
                }
                continue;
            }
            let failed = envelope
                .as_ref()
                .is_some_and(|e| e.status == ToolStatus::InvalidArgs.to_string());
            results.push(envelope);
            if failed {
                if let Some(alt) = self.fallbacks.get(&call.name) {
                    let old = call.name.clone();
                    retry = Some((
                        old,
                        ToolCall {
                            name: alt.clone(),
                            arguments: call.arguments,
                        },
                    ));
                }
            }
        }
        if let Some((old, call)) = retry {
            return Ok(format!(
                "The {old} tool is unavailable, so I will try {} instead.\n{}",
                call.name,
                render_tool_call(&call)
            ));
        }
        let template = &self.plan[cursor.min(self.plan.len() - 1)];
        let guess_seed = mix(request.sampling.seed, request.turn as u64);
        Ok(self.render(template, &results, guess_seed))
    }
}

fn call_text(tool: ToolName, arguments: Value) -> String {
    let args: Map<String, Value> = arguments.as_object().cloned().unwrap_or_default();
    render_tool_call(&ToolCall::new(tool.as_str(), args))
}

/// The canonical tool sequence for a synthetic task, ending in an answer
/// derived from the tool results.
pub fn oracle_policy_for(task: &Task) -> Result<ScriptedPolicy, PolicyError> {
    let template = task
        .template
        .as_ref()
        .ok_or_else(|| PolicyError::Construction(format!("task {} has no template", task.task_id)))?;
    let plan = match template {
        TaskTemplate::CountEvent { label } => vec![
            format!(
                "I need to count how many times \"{label}\" happens in the video.\n{}",
                call_text(ToolName::TemporalCount, json!({ "query": label }))
            ),
            "The temporal count tool reports count={tool[1].note.count}.\n<answer>{option:tool[1].note.count}</answer>".to_string(),
        ],
        TaskTemplate::SpanOfEvent { label } => vec![
            format!(
                "I should locate \"{label}\" in time.\n{}",
                call_text(ToolName::TemporalGrounding, json!({ "query": label }))
            ),
            format!(
                "Next I will check the most representative frame of that event.\n{}",
                call_text(ToolName::FrameSelection, json!({ "query": label }))
            ),
            "The frame confirms the event, so its span is {tool[1].note.span}.\n<answer>{option:tool[1].note.span}</answer>".to_string(),
        ],
        TaskTemplate::OrderEvents { labels } => {
            let mut plan: Vec<String> = labels
                .iter()
                .enumerate()
                .map(|(i, label)| {
                    let lead = if i == 0 {
                        "To order the events I will ground each of them in time."
                    } else {
                        "Next event."
                    };
                    format!(
                        "{lead}\n{}",
                        call_text(ToolName::TemporalGrounding, json!({ "query": label }))
                    )
                })
                .collect();
            let refs: Vec<String> = (1..=labels.len()).map(|i| i.to_string()).collect();
            let refs = refs.join(",");
            plan.push(format!(
                "Sorting the grounded spans by start time gives {{order[{refs}]}}.\n<answer>{{option:order[{refs}]}}</answer>"
            ));
            plan
        }
        TaskTemplate::ObjectAtTime { time_s } => {
            let spatial = if (*time_s as u64).is_multiple_of(2) {
                ToolName::SpatialGrounding
            } else {
                ToolName::SpatialTracking
            };
            let window = json!({ "start_s": time_s, "end_s": time_s + 1.0 });
            let mut spatial_args = window.clone();
            spatial_args["objects"] = json!(task.question.options);
            vec![
                format!(
                    "I will cut the moment at {time_s:.1} s.\n{}",
                    call_text(ToolName::Trim, window)
                ),
                format!(
                    "Now I will check which of the candidate objects appear there.\n{}",
                    call_text(spatial, spatial_args)
                ),
                "The visible object is {tool[2].note.found}.\n<answer>{option:tool[2].note.found}</answer>".to_string(),
            ]
        }
    };
    ScriptedPolicy::new(plan, task.question.options.clone())
}

/// The oracle plan's tool-calling turns as one rewritten trajectory, the
/// shape a dataset rewriter produces from a text-only chain of thought.
pub fn oracle_rewrite_for(task: &Task) -> Result<ScriptedPolicy, PolicyError> {
    let plan = oracle_policy_for(task)?.plan;
    let body = plan[..plan.len() - 1].join("\n");
    Ok(ScriptedPolicy::looping(body))
}

/// The oracle plan, plus switching between the two spatial tools when one
/// is unavailable.
pub fn fallback_policy_for(task: &Task) -> Result<ScriptedPolicy, PolicyError> {
    Ok(oracle_policy_for(task)?
        .with_fallback(ToolName::SpatialGrounding, ToolName::SpatialTracking)
        .with_fallback(ToolName::SpatialTracking, ToolName::SpatialGrounding))
}

/// Scripted policy families addressable by name (`scripted:<name>`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptedProvider {
    Oracle,
    Fallback,
    /// Answers immediately with a seeded guess.
    NoTools,
    /// Thinks forever without answering.
    NeverAnswer,
    /// Emits the oracle's tool calls as a single rewritten trajectory.
    OracleRewrite,
}

impl std::str::FromStr for ScriptedProvider {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "fallback" => Ok(Self::Fallback),
            "no-tools" => Ok(Self::NoTools),
            "never-answer" => Ok(Self::NeverAnswer),
            "oracle-rewrite" => Ok(Self::OracleRewrite),
            other => Err(format!(
                "unknown scripted policy {other:?} (oracle, fallback, no-tools, never-answer, oracle-rewrite)"
            )),
        }
    }
}

impl PolicyProvider for ScriptedProvider {
    fn policy_for(&self, task: &Task) -> Result<Arc<dyn PolicyBackend>, PolicyError> {
        let policy = match self {
            Self::Oracle => oracle_policy_for(task)?,
            Self::Fallback => fallback_policy_for(task)?,
            Self::NoTools => ScriptedPolicy::new(
                vec!["I will answer from the sampled frames.\n<answer>{guess}</answer>".into()],
                task.question.options.clone(),
            )?,
            Self::NeverAnswer => ScriptedPolicy::looping("Let me keep thinking about this."),
            Self::OracleRewrite => oracle_rewrite_for(task)?,
        };
        Ok(Arc::new(policy))
    }
}
