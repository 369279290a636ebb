//! Interleaved history state: videos, clips, questions, steps, and the
//! append-only segment sequence handed to the policy model.
//!
//! A history starts as `[prompt, v0]` and grows by one assistant text
//! segment per step, plus one tool segment when the step called a tool.
//! Segment token counts are computed once, when the segment is appended,
//! and reused by every later context assembly.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{render_tool_result, ToolCall};
use crate::toolkit::ToolResult;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HistoryError {
    #[error("invalid video metadata for {video_id:?}: {reason}")]
    InvalidVideo { video_id: String, reason: String },
    #[error("n_frames must be at least 1")]
    NoFrames,
    #[error("context budget must be positive")]
    ZeroBudget,
    #[error("prompt and initial clip need {required} tokens, budget is {budget}")]
    Overflow { required: usize, budget: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    pub duration_s: f64,
    pub fps: f64,
    pub width: u32,
    pub height: u32,
}

impl VideoMeta {
    pub fn validate(&self) -> Result<(), HistoryError> {
        let fail = |reason: &str| {
            Err(HistoryError::InvalidVideo {
                video_id: self.video_id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.video_id.is_empty() {
            return fail("empty video_id");
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return fail("duration_s must be positive");
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return fail("fps must be positive");
        }
        if self.duration_s * self.fps < 1.0 {
            return fail("video holds less than one frame");
        }
        if self.width == 0 || self.height == 0 {
            return fail("frame size must be positive");
        }
        Ok(())
    }

    /// Number of decoded frames in the video, `floor(duration_s * fps)`.
    pub fn available_frames(&self) -> usize {
        (self.duration_s * self.fps + 1e-9).floor() as usize
    }

    pub fn full_span(&self) -> Span {
        Span::new(0.0, self.duration_s)
    }
}

/// Lookup of video metadata by id.
pub trait VideoCatalog: Send + Sync {
    fn video_meta(&self, video_id: &str) -> Option<VideoMeta>;
}

impl VideoCatalog for std::collections::BTreeMap<String, VideoMeta> {
    fn video_meta(&self, video_id: &str) -> Option<VideoMeta> {
        self.get(video_id).cloned()
    }
}

/// Half-open time interval in seconds, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Span {
    pub start_s: f64,
    pub end_s: f64,
}

impl Span {
    pub const fn new(start_s: f64, end_s: f64) -> Self {
        Self { start_s, end_s }
    }

    pub fn len(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn is_empty(&self) -> bool {
        self.end_s <= self.start_s
    }

    pub fn contains_span(&self, other: &Span) -> bool {
        other.start_s >= self.start_s - 1e-9 && other.end_s <= self.end_s + 1e-9
    }

    pub fn intersect(&self, other: &Span) -> Option<Span> {
        let s = self.start_s.max(other.start_s);
        let e = self.end_s.min(other.end_s);
        (s < e).then(|| Span::new(s, e))
    }

    pub fn clamp_to(&self, outer: &Span) -> Span {
        Span::new(
            self.start_s.clamp(outer.start_s, outer.end_s),
            self.end_s.clamp(outer.start_s, outer.end_s),
        )
    }
}

impl From<[f64; 2]> for Span {
    fn from(v: [f64; 2]) -> Self {
        Span::new(v[0], v[1])
    }
}

impl From<Span> for [f64; 2] {
    fn from(s: Span) -> Self {
        [s.start_s, s.end_s]
    }
}

/// Pixel box `[x0, y0, x1, y1]`.
pub type BBox = [f64; 4];

pub fn bbox_area(b: &BBox) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<u32>,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameBoxes {
    pub t: f64,
    pub boxes: Vec<LabeledBox>,
}

/// A set of frames of one video, referenced by time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub video_id: String,
    pub span: Span,
    pub frame_times: Vec<f64>,
    #[serde(default)]
    pub boxes: Vec<FrameBoxes>,
}

impl Clip {
    pub fn frame_count(&self) -> usize {
        self.frame_times.len()
    }

    /// Checks the clip invariants against its video.
    pub fn check(&self, video: &VideoMeta) -> Result<(), String> {
        let Span { start_s, end_s } = self.span;
        if !(0.0 <= start_s && start_s < end_s && end_s <= video.duration_s + 1e-9) {
            return Err(format!("span [{start_s}, {end_s}] outside video"));
        }
        if self.frame_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err("frame times not strictly increasing".into());
        }
        if self
            .frame_times
            .iter()
            .any(|&t| t < start_s - 1e-9 || t > end_s + 1e-9)
        {
            return Err("frame time outside span".into());
        }
        if self
            .boxes
            .iter()
            .any(|fb| !self.frame_times.iter().any(|&t| (t - fb.t).abs() < 1e-9))
        {
            return Err("annotation time not among frame times".into());
        }
        Ok(())
    }
}

/// Frame times `t_k = start + (k + 0.5) * len / n` for `k < n`.
pub fn uniform_frame_times(span: Span, n: usize) -> Vec<f64> {
    let step = span.len() / n as f64;
    (0..n)
        .map(|k| span.start_s + (k as f64 + 0.5) * step)
        .collect()
}

/// Initial clip `v0`: `min(n_frames, available)` uniformly spaced frames.
pub fn initial_clip(video: &VideoMeta, n_frames: usize) -> Result<Clip, HistoryError> {
    video.validate()?;
    if n_frames == 0 {
        return Err(HistoryError::NoFrames);
    }
    let n = n_frames.min(video.available_frames()).max(1);
    Ok(Clip {
        video_id: video.video_id.clone(),
        span: video.full_span(),
        frame_times: uniform_frame_times(video.full_span(), n),
        boxes: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    MultipleChoice,
    OpenEnded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    pub qtype: QuestionType,
    #[serde(default)]
    pub options: Vec<String>,
    pub gold: String,
}

impl Question {
    pub fn multiple_choice(text: impl Into<String>, options: Vec<String>, gold: char) -> Self {
        Self {
            text: text.into(),
            qtype: QuestionType::MultipleChoice,
            options,
            gold: gold.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.qtype {
            QuestionType::MultipleChoice => {
                if !(2..=26).contains(&self.options.len()) {
                    return Err(format!("{} options, need 2..=26", self.options.len()));
                }
                let mut chars = self.gold.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) if option_index(c).is_some_and(|i| i < self.options.len()) => {
                        Ok(())
                    }
                    _ => Err(format!("gold {:?} is not an option letter", self.gold)),
                }
            }
            QuestionType::OpenEnded => {
                if self.gold.trim().is_empty() {
                    Err("open-ended gold must be nonempty".into())
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Question text with lettered options, as shown to the policy.
    pub fn render(&self) -> String {
        let mut out = self.text.clone();
        if self.qtype == QuestionType::MultipleChoice {
            out.push_str("\nOptions:");
            for (i, opt) in self.options.iter().enumerate() {
                out.push_str(&format!("\n{}. {}", option_letter(i), opt));
            }
        }
        out
    }

    /// Option text for a letter, if in range.
    pub fn option_text(&self, letter: &str) -> Option<&str> {
        let mut chars = letter.chars();
        let c = chars.next()?;
        if chars.next().is_some() {
            return None;
        }
        self.options.get(option_index(c)?).map(String::as_str)
    }
}

pub fn option_letter(index: usize) -> char {
    (b'A' + index as u8) as char
}

pub fn option_index(letter: char) -> Option<usize> {
    letter
        .is_ascii_uppercase()
        .then(|| (letter as u8 - b'A') as usize)
}

/// One reasoning step `s_i`: the response text plus whatever it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub response_text: String,
    pub tool_call: Option<ToolCall>,
    pub tool_result: Option<ToolResult>,
    pub answer: Option<String>,
    #[serde(default)]
    pub protocol_flags: Vec<String>,
    /// Tokens in the context assembled for this step.
    #[serde(default)]
    pub context_tokens: usize,
    /// Segments evicted from that context.
    #[serde(default)]
    pub evicted_segments: usize,
}

impl StepRecord {
    pub fn text_only(text: impl Into<String>) -> Self {
        Self {
            response_text: text.into(),
            tool_call: None,
            tool_result: None,
            answer: None,
            protocol_flags: Vec::new(),
            context_tokens: 0,
            evicted_segments: 0,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if self.answer.is_some() && self.tool_result.is_some() {
            return Err("answered step carries a tool result".into());
        }
        if self.tool_result.is_some() && self.tool_call.is_none() {
            return Err("tool result without tool call".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    /// System prompt followed by the rendered question.
    Prompt {
        system: String,
        question: String,
        token_count: usize,
    },
    Text {
        role: Role,
        text: String,
        token_count: usize,
    },
    /// A clip plus its textual tool envelope (empty for `v0`).
    Visual {
        clip: Clip,
        caption: String,
        token_count: usize,
    },
}

impl Segment {
    pub fn token_count(&self) -> usize {
        match self {
            Segment::Prompt { token_count, .. }
            | Segment::Text { token_count, .. }
            | Segment::Visual { token_count, .. } => *token_count,
        }
    }

    pub fn is_visual(&self) -> bool {
        matches!(self, Segment::Visual { .. })
    }
}

/// Token cost model standing in for the vision and text encoders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenCosts {
    pub tokens_per_frame: usize,
}

impl Default for TokenCosts {
    fn default() -> Self {
        Self {
            tokens_per_frame: 32,
        }
    }
}

impl TokenCosts {
    /// `ceil(bytes / 4)`.
    pub fn text(&self, text: &str) -> usize {
        text.len().div_ceil(4)
    }

    pub fn visual(&self, frames: usize, caption: &str) -> usize {
        frames * self.tokens_per_frame + self.text(caption)
    }

    /// Cost of a segment; a count reported by the policy backend wins.
    pub fn token_cost(&self, segment: &Segment, reported: Option<usize>) -> usize {
        if let Some(n) = reported {
            return n;
        }
        match segment {
            Segment::Prompt {
                system, question, ..
            } => self.text(&prompt_text(system, question)),
            Segment::Text { text, .. } => self.text(text),
            Segment::Visual { clip, caption, .. } => self.visual(clip.frame_count(), caption),
        }
    }
}

pub fn prompt_text(system: &str, question: &str) -> String {
    if system.is_empty() {
        question.to_string()
    } else {
        format!("{system}\n\n{question}")
    }
}

/// The interleaved history `H_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryState {
    segments: Vec<Arc<Segment>>,
    cached_prefix_len: usize,
}

impl HistoryState {
    /// `H_0 = (Q, v0)`.
    pub fn init(
        question: &Question,
        video: &VideoMeta,
        n_frames: usize,
        system_prompt: &str,
        costs: &TokenCosts,
    ) -> Result<Self, HistoryError> {
        let v0 = initial_clip(video, n_frames)?;
        let question_text = question.render();
        let prompt_tokens = costs.text(&prompt_text(system_prompt, &question_text));
        let v0_tokens = costs.visual(v0.frame_count(), "");
        Ok(Self {
            segments: vec![
                Arc::new(Segment::Prompt {
                    system: system_prompt.to_string(),
                    question: question_text,
                    token_count: prompt_tokens,
                }),
                Arc::new(Segment::Visual {
                    clip: v0,
                    caption: String::new(),
                    token_count: v0_tokens,
                }),
            ],
            cached_prefix_len: 0,
        })
    }

    /// Successor state with the step's segments appended.
    pub fn append_step(&self, step: &StepRecord, costs: &TokenCosts) -> Self {
        let mut segments = self.segments.clone();
        segments.push(Arc::new(Segment::Text {
            role: Role::Assistant,
            token_count: costs.text(&step.response_text),
            text: step.response_text.clone(),
        }));
        if let Some(result) = &step.tool_result {
            let envelope = render_tool_result(result);
            let segment = match &result.clip {
                Some(clip) => Segment::Visual {
                    token_count: costs.visual(clip.frame_count(), &envelope),
                    clip: clip.clone(),
                    caption: envelope,
                },
                None => Segment::Text {
                    role: Role::Tool,
                    token_count: costs.text(&envelope),
                    text: envelope,
                },
            };
            segments.push(Arc::new(segment));
        }
        Self {
            segments,
            cached_prefix_len: self.segments.len(),
        }
    }

    pub fn segments(&self) -> &[Arc<Segment>] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn cached_prefix_len(&self) -> usize {
        self.cached_prefix_len
    }

    pub fn initial_clip(&self) -> &Clip {
        match self.segments[1].as_ref() {
            Segment::Visual { clip, .. } => clip,
            _ => unreachable!("second segment of a history is v0"),
        }
    }

    pub fn total_tokens(&self) -> usize {
        self.segments.iter().map(|s| s.token_count()).sum()
    }

    /// Assembles the context for the next policy call within `budget` tokens.
    ///
    /// Overflow is resolved by dropping whole tool clips oldest-first, then
    /// the oldest assistant or tool text. The prompt and `v0` stay pinned.
    pub fn assemble_context(&self, budget: usize) -> Result<ContextView, HistoryError> {
        if budget == 0 {
            return Err(HistoryError::ZeroBudget);
        }
        let pinned: usize = self.segments[..2].iter().map(|s| s.token_count()).sum();
        if pinned > budget {
            return Err(HistoryError::Overflow {
                required: pinned,
                budget,
            });
        }
        let mut keep = vec![true; self.segments.len()];
        let mut total = self.total_tokens();
        for visual_pass in [true, false] {
            for (i, seg) in self.segments.iter().enumerate().skip(2) {
                if total <= budget {
                    break;
                }
                if keep[i] && seg.is_visual() == visual_pass {
                    keep[i] = false;
                    total -= seg.token_count();
                }
            }
        }
        let mut entries = Vec::new();
        let mut evicted = Vec::new();
        for (i, seg) in self.segments.iter().enumerate() {
            if keep[i] {
                entries.push(ContextEntry {
                    index: i,
                    segment: Arc::clone(seg),
                });
            } else {
                evicted.push(i);
            }
        }
        Ok(ContextView {
            entries,
            evicted,
            total_tokens: total,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextEntry {
    /// Position of the segment in the full history.
    pub index: usize,
    pub segment: Arc<Segment>,
}

/// The ordered, budgeted segment view passed to the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextView {
    pub entries: Vec<ContextEntry>,
    pub evicted: Vec<usize>,
    pub total_tokens: usize,
}

impl ContextView {
    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.entries.iter().map(|e| e.segment.as_ref())
    }
}
