//! The tool library: argument schemas, validated dispatch, and backends.
//!
//! [`Toolkit::dispatch`] validates a raw [`ToolCall`] against its
//! [`ToolSpec`], resolves the clip span, and hands the typed
//! [`Invocation`] to a [`ToolBackend`]. Failures come back as results with
//! a non-ok status so the policy can read them and try again.

mod intervals;
pub mod oracle;
pub mod remote;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::history::{Clip, FrameBoxes, Span, VideoMeta};
use crate::protocol::ToolCall;

pub use intervals::{cap_uniform, merge_spans, one_fps_grid};
pub use oracle::OracleBackend;
pub use remote::RemoteToolBackend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolName {
    TemporalGrounding,
    FrameSelection,
    TemporalCount,
    Trim,
    SpatialTracking,
    SpatialGrounding,
}

impl ToolName {
    /// Table order: TG, FS, TR, TC, ST, SG.
    pub const ALL: [ToolName; 6] = [
        ToolName::TemporalGrounding,
        ToolName::FrameSelection,
        ToolName::Trim,
        ToolName::TemporalCount,
        ToolName::SpatialTracking,
        ToolName::SpatialGrounding,
    ];

    pub const TEMPORAL: [ToolName; 4] = [
        ToolName::TemporalGrounding,
        ToolName::FrameSelection,
        ToolName::Trim,
        ToolName::TemporalCount,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ToolName::TemporalGrounding => "temporal_grounding",
            ToolName::FrameSelection => "frame_selection",
            ToolName::TemporalCount => "temporal_count",
            ToolName::Trim => "trim",
            ToolName::SpatialTracking => "spatial_tracking",
            ToolName::SpatialGrounding => "spatial_grounding",
        }
    }

    /// Two-letter abbreviation used in ablation tables.
    pub fn abbrev(&self) -> &'static str {
        match self {
            ToolName::TemporalGrounding => "TG",
            ToolName::FrameSelection => "FS",
            ToolName::TemporalCount => "TC",
            ToolName::Trim => "TR",
            ToolName::SpatialTracking => "ST",
            ToolName::SpatialGrounding => "SG",
        }
    }
}

impl fmt::Display for ToolName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ToolName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ToolName::ALL
            .into_iter()
            .find(|t| t.as_str() == s || t.abbrev() == s)
            .ok_or_else(|| format!("unknown tool {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolStatus {
    Ok,
    NotFound,
    InvalidArgs,
}

impl fmt::Display for ToolStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToolStatus::Ok => "ok",
            ToolStatus::NotFound => "not_found",
            ToolStatus::InvalidArgs => "invalid_args",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub tool_name: String,
    pub status: ToolStatus,
    pub clip: Option<Clip>,
    pub note: String,
}

impl ToolResult {
    pub fn ok(tool: ToolName, clip: Clip, note: String) -> Self {
        Self {
            tool_name: tool.to_string(),
            status: ToolStatus::Ok,
            clip: Some(clip),
            note,
        }
    }

    pub fn failure(tool_name: &str, status: ToolStatus, note: String) -> Self {
        debug_assert_ne!(status, ToolStatus::Ok);
        Self {
            tool_name: tool_name.to_string(),
            status,
            clip: None,
            note,
        }
    }

    pub fn invalid_args(tool_name: &str, reason: &str) -> Self {
        Self::failure(tool_name, ToolStatus::InvalidArgs, note(&[("error", reason)]))
    }

    pub fn is_ok(&self) -> bool {
        self.status == ToolStatus::Ok
    }
}

/// Formats `key=value; key=value`. Separators inside values are blanked.
pub fn note(fields: &[(&str, &str)]) -> String {
    fields
        .iter()
        .map(|(k, v)| format!("{k}={}", v.replace([';', '\n', '\r'], " ")))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgKind {
    String,
    Number,
    StringList,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArgSpec {
    pub name: &'static str,
    pub kind: ArgKind,
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ToolSpec {
    pub name: ToolName,
    pub args: Vec<ArgSpec>,
    pub doc: &'static str,
}

const fn arg(name: &'static str, kind: ArgKind, required: bool) -> ArgSpec {
    ArgSpec {
        name,
        kind,
        required,
    }
}

const SPAN_ARGS: [ArgSpec; 2] = [
    arg("start_s", ArgKind::Number, false),
    arg("end_s", ArgKind::Number, false),
];

pub fn tool_spec(name: ToolName) -> ToolSpec {
    use ArgKind::*;
    let (first, doc) = match name {
        ToolName::TemporalGrounding => (
            arg("query", String, true),
            "Ground a video clip temporally according to a text query. Returns the earliest matching clip.",
        ),
        ToolName::FrameSelection => (
            arg("query", String, true),
            "Select the single most representative frame for a text query.",
        ),
        ToolName::TemporalCount => (
            arg("query", String, true),
            "Find every clip where the query occurs, merge them, and return the spliced clips with their count.",
        ),
        ToolName::Trim => {
            return ToolSpec {
                name,
                args: vec![arg("start_s", Number, true), arg("end_s", Number, true)],
                doc: "Cut the clip between start_s and end_s seconds.",
            }
        }
        ToolName::SpatialTracking => (
            arg("objects", StringList, true),
            "Track the listed objects through the clip, boxing each instance with a persistent id.",
        ),
        ToolName::SpatialGrounding => (
            arg("objects", StringList, true),
            "Box every instance of the listed objects on each frame independently.",
        ),
    };
    let mut args = vec![first];
    args.extend(SPAN_ARGS);
    ToolSpec { name, args, doc }
}

pub fn tool_specs() -> Vec<ToolSpec> {
    ToolName::ALL.into_iter().map(tool_spec).collect()
}

/// Tool documentation block embedded in the system prompt.
pub fn render_tool_docs() -> String {
    let mut out = String::new();
    for spec in tool_specs() {
        let args: Vec<String> = spec
            .args
            .iter()
            .map(|a| {
                let kind = match a.kind {
                    ArgKind::String => "string",
                    ArgKind::Number => "number",
                    ArgKind::StringList => "list of strings",
                };
                let req = if a.required { "required" } else { "optional" };
                format!("{} ({kind}, {req})", a.name)
            })
            .collect();
        out.push_str(&format!(
            "- {}: {} Arguments: {}.\n",
            spec.name,
            spec.doc,
            args.join(", ")
        ));
    }
    out
}

/// A validated call with its span resolved against the video.
#[derive(Debug, Clone, PartialEq)]
pub enum Invocation {
    TemporalGrounding { query: String, span: Span },
    FrameSelection { query: String, span: Span },
    TemporalCount { query: String, span: Span },
    Trim { span: Span },
    SpatialTracking { objects: Vec<String>, span: Span },
    SpatialGrounding { objects: Vec<String>, span: Span },
}

impl Invocation {
    pub fn tool(&self) -> ToolName {
        match self {
            Invocation::TemporalGrounding { .. } => ToolName::TemporalGrounding,
            Invocation::FrameSelection { .. } => ToolName::FrameSelection,
            Invocation::TemporalCount { .. } => ToolName::TemporalCount,
            Invocation::Trim { .. } => ToolName::Trim,
            Invocation::SpatialTracking { .. } => ToolName::SpatialTracking,
            Invocation::SpatialGrounding { .. } => ToolName::SpatialGrounding,
        }
    }

    pub fn span(&self) -> Span {
        match self {
            Invocation::TemporalGrounding { span, .. }
            | Invocation::FrameSelection { span, .. }
            | Invocation::TemporalCount { span, .. }
            | Invocation::Trim { span }
            | Invocation::SpatialTracking { span, .. }
            | Invocation::SpatialGrounding { span, .. } => *span,
        }
    }

    /// Argument object with the resolved span, as sent to remote backends.
    pub fn arguments(&self) -> serde_json::Map<String, Value> {
        let mut map = serde_json::Map::new();
        match self {
            Invocation::TemporalGrounding { query, .. }
            | Invocation::FrameSelection { query, .. }
            | Invocation::TemporalCount { query, .. } => {
                map.insert("query".into(), Value::from(query.as_str()));
            }
            Invocation::SpatialTracking { objects, .. }
            | Invocation::SpatialGrounding { objects, .. } => {
                map.insert("objects".into(), Value::from(objects.clone()));
            }
            Invocation::Trim { .. } => {}
        }
        let span = self.span();
        map.insert("start_s".into(), Value::from(span.start_s));
        map.insert("end_s".into(), Value::from(span.end_s));
        map
    }
}

/// Validates a call against its schema and resolves its span.
///
/// Omitted span bounds default to `default_span`; the result is clamped to
/// the video and must be nonempty.
pub fn validate_call(
    call: &ToolCall,
    video: &VideoMeta,
    default_span: Span,
) -> Result<Invocation, String> {
    let tool: ToolName = call.name.parse()?;
    if call.name != tool.as_str() {
        return Err(format!("unknown tool {:?}", call.name));
    }
    let spec = tool_spec(tool);
    for key in call.arguments.keys() {
        if !spec.args.iter().any(|a| a.name == key) {
            return Err(format!("unexpected argument {key:?} for {tool}"));
        }
    }
    for a in &spec.args {
        if a.required && !call.arguments.contains_key(a.name) {
            return Err(format!("missing required argument {:?}", a.name));
        }
    }
    let number = |key: &str| -> Result<Option<f64>, String> {
        match call.arguments.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_f64()
                .filter(|x| x.is_finite())
                .map(Some)
                .ok_or_else(|| format!("argument {key:?} must be a finite number")),
        }
    };
    let query = || -> Result<String, String> {
        match call.arguments.get("query").and_then(Value::as_str) {
            Some(q) if !q.trim().is_empty() => Ok(q.trim().to_string()),
            Some(_) => Err("argument \"query\" must be nonempty".into()),
            None => Err("argument \"query\" must be a string".into()),
        }
    };
    let objects = || -> Result<Vec<String>, String> {
        let list = call
            .arguments
            .get("objects")
            .and_then(Value::as_array)
            .ok_or("argument \"objects\" must be a list of strings")?;
        let mut out = Vec::with_capacity(list.len());
        for item in list {
            match item.as_str() {
                Some(s) if !s.trim().is_empty() => out.push(s.trim().to_string()),
                _ => return Err("argument \"objects\" must hold nonempty strings".into()),
            }
        }
        if out.is_empty() {
            return Err("argument \"objects\" must be nonempty".into());
        }
        Ok(out)
    };
    let start = number("start_s")?.unwrap_or(default_span.start_s);
    let end = number("end_s")?.unwrap_or(default_span.end_s);
    let span = Span::new(start, end).clamp_to(&video.full_span());
    if span.is_empty() {
        return Err(format!(
            "empty span [{:.2},{:.2}] after clamping",
            span.start_s, span.end_s
        ));
    }
    Ok(match tool {
        ToolName::TemporalGrounding => Invocation::TemporalGrounding {
            query: query()?,
            span,
        },
        ToolName::FrameSelection => Invocation::FrameSelection {
            query: query()?,
            span,
        },
        ToolName::TemporalCount => Invocation::TemporalCount {
            query: query()?,
            span,
        },
        ToolName::Trim => Invocation::Trim { span },
        ToolName::SpatialTracking => Invocation::SpatialTracking {
            objects: objects()?,
            span,
        },
        ToolName::SpatialGrounding => Invocation::SpatialGrounding {
            objects: objects()?,
            span,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolConfig {
    pub max_tool_frames: usize,
    /// Matching spans closer than this are merged by temporal_count.
    pub merge_gap_s: f64,
    pub enabled: BTreeSet<ToolName>,
}

impl Default for ToolConfig {
    fn default() -> Self {
        Self {
            max_tool_frames: 32,
            merge_gap_s: 0.0,
            enabled: ToolName::ALL.into_iter().collect(),
        }
    }
}

impl ToolConfig {
    pub fn with_enabled(mut self, enabled: impl IntoIterator<Item = ToolName>) -> Self {
        self.enabled = enabled.into_iter().collect();
        self
    }
}

/// Builds a clip over one or more spans: the 1 fps grid of each span,
/// concatenated, then uniformly capped at `max_frames`.
pub fn clip_over(
    video_id: &str,
    spans: &[Span],
    boxes: Vec<FrameBoxes>,
    max_frames: usize,
) -> Option<Clip> {
    let first = spans.first()?;
    let last = spans.last()?;
    let times: Vec<f64> = spans.iter().flat_map(one_fps_grid).collect();
    let frame_times = cap_uniform(times, max_frames);
    let boxes = boxes
        .into_iter()
        .filter(|fb| {
            !fb.boxes.is_empty() && frame_times.iter().any(|&t| (t - fb.t).abs() < 1e-9)
        })
        .collect();
    Some(Clip {
        video_id: video_id.to_string(),
        span: Span::new(first.start_s, last.end_s),
        frame_times,
        boxes,
    })
}

/// Executes validated invocations against some source of video content.
pub trait ToolBackend: Send + Sync {
    fn execute(&self, video: &VideoMeta, invocation: &Invocation, config: &ToolConfig)
        -> ToolResult;
}

/// Validation plus routing to a backend, with per-tool enablement.
#[derive(Clone)]
pub struct Toolkit {
    pub config: ToolConfig,
    backend: Arc<dyn ToolBackend>,
}

impl fmt::Debug for Toolkit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Toolkit")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Toolkit {
    pub fn new(backend: Arc<dyn ToolBackend>, config: ToolConfig) -> Self {
        Self { config, backend }
    }

    /// Same backend, different tool subset.
    pub fn with_enabled(&self, enabled: impl IntoIterator<Item = ToolName>) -> Self {
        Self {
            config: self.config.clone().with_enabled(enabled),
            backend: Arc::clone(&self.backend),
        }
    }

    pub fn dispatch(&self, call: &ToolCall, video: &VideoMeta) -> ToolResult {
        self.dispatch_in(call, video, video.full_span())
    }

    pub fn dispatch_in(&self, call: &ToolCall, video: &VideoMeta, default_span: Span) -> ToolResult {
        let invocation = match validate_call(call, video, default_span) {
            Ok(inv) => inv,
            Err(reason) => return ToolResult::invalid_args(&call.name, &reason),
        };
        if !self.config.enabled.contains(&invocation.tool()) {
            return ToolResult::invalid_args(&call.name, "tool disabled");
        }
        self.backend.execute(video, &invocation, &self.config)
    }
}
