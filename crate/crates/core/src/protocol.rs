//! Response grammar: reasoning text, `<tool_call>` payloads, `<answer>`
//! spans, and the textual envelope that carries tool results back to the
//! policy.
//!
//! Parsing never fails. Every defect becomes a diagnostic on the
//! [`ParsedResponse`] so that a malformed response costs reward instead of
//! halting the episode.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::history::{option_index, Question, QuestionType, Span};
use crate::toolkit::{ToolResult, ToolStatus};

pub const TOOL_CALL_OPEN: &str = "<tool_call>";
pub const TOOL_CALL_CLOSE: &str = "</tool_call>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";
pub const ENVELOPE_OPEN: &str = "<tool_response>";
pub const ENVELOPE_CLOSE: &str = "</tool_response>";
/// Marks where the returned clip's frames are inserted.
pub const VIDEO_PLACEHOLDER: &str = "<video>";

pub const DIAG_UNPARSEABLE: &str = "unparseable payload";
pub const DIAG_UNCLOSED_TOOL_CALL: &str = "unclosed <tool_call>";
pub const DIAG_UNCLOSED_ANSWER: &str = "unclosed <answer>";
pub const DIAG_EXTRA_TOOL_CALLS: &str = "extra tool_call blocks ignored";
pub const DIAG_EXTRA_ANSWERS: &str = "extra answer blocks ignored";
pub const DIAG_SUPERSEDED: &str = "tool call superseded by answer";

/// A tool invocation as written by the policy: `{"name": …, "arguments": {…}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    pub arguments: Map<String, Value>,
}

impl ToolCall {
    pub fn new(name: impl Into<String>, arguments: Map<String, Value>) -> Self {
        Self {
            name: name.into(),
            arguments,
        }
    }

    pub fn to_payload(&self) -> String {
        serde_json::to_string(self).expect("tool call serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub reasoning_text: String,
    pub tool_call: Option<ToolCall>,
    /// The call was present but an answer in the same response wins.
    pub tool_call_superseded: bool,
    pub answer_span: Option<String>,
    pub format_ok: bool,
    pub diagnostics: Vec<String>,
}

impl ParsedResponse {
    /// The call the engine should dispatch, if any.
    pub fn action_call(&self) -> Option<&ToolCall> {
        if self.tool_call_superseded {
            None
        } else {
            self.tool_call.as_ref()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Block {
    start: usize,
    end: usize,
    inner_start: usize,
    inner_end: usize,
}

/// Non-overlapping `open…close` blocks, each closed by the nearest `close`.
/// Returns the blocks and whether a trailing `open` was left unclosed.
fn find_blocks(text: &str, open: &str, close: &str) -> (Vec<Block>, bool) {
    let mut blocks = Vec::new();
    let mut pos = 0;
    while let Some(rel) = text[pos..].find(open) {
        let start = pos + rel;
        let inner_start = start + open.len();
        match text[inner_start..].find(close) {
            Some(rel_close) => {
                let inner_end = inner_start + rel_close;
                let end = inner_end + close.len();
                blocks.push(Block {
                    start,
                    end,
                    inner_start,
                    inner_end,
                });
                pos = end;
            }
            None => return (blocks, true),
        }
    }
    (blocks, false)
}

/// Parses a tool payload; the error is a human-readable diagnostic.
pub fn parse_tool_payload(payload: &str) -> Result<ToolCall, String> {
    let value: Value = serde_json::from_str(payload.trim())
        .map_err(|e| format!("{DIAG_UNPARSEABLE}: {e}"))?;
    let Value::Object(mut obj) = value else {
        return Err(format!("{DIAG_UNPARSEABLE}: payload is not an object"));
    };
    let name = match obj.remove("name") {
        Some(Value::String(s)) => s,
        Some(_) => return Err(format!("{DIAG_UNPARSEABLE}: \"name\" is not a string")),
        None => return Err(format!("{DIAG_UNPARSEABLE}: missing \"name\"")),
    };
    let arguments = match obj.remove("arguments") {
        Some(Value::Object(map)) => map,
        Some(_) => return Err(format!("{DIAG_UNPARSEABLE}: \"arguments\" is not an object")),
        None => return Err(format!("{DIAG_UNPARSEABLE}: missing \"arguments\"")),
    };
    if let Some(extra) = obj.keys().next() {
        return Err(format!("{DIAG_UNPARSEABLE}: unexpected field {extra:?}"));
    }
    Ok(ToolCall { name, arguments })
}

pub fn parse_response(text: &str) -> ParsedResponse {
    let mut diagnostics = Vec::new();

    let (answers, answer_unclosed) = find_blocks(text, ANSWER_OPEN, ANSWER_CLOSE);
    if answer_unclosed {
        diagnostics.push(DIAG_UNCLOSED_ANSWER.to_string());
    }
    if answers.len() > 1 {
        diagnostics.push(DIAG_EXTRA_ANSWERS.to_string());
    }
    let answer_span = answers
        .first()
        .map(|b| text[b.inner_start..b.inner_end].to_string());

    let (calls, call_unclosed) = find_blocks(text, TOOL_CALL_OPEN, TOOL_CALL_CLOSE);
    if call_unclosed {
        diagnostics.push(DIAG_UNCLOSED_TOOL_CALL.to_string());
    }
    if calls.len() > 1 {
        diagnostics.push(DIAG_EXTRA_TOOL_CALLS.to_string());
    }
    let tool_call = calls.first().and_then(|b| {
        match parse_tool_payload(&text[b.inner_start..b.inner_end]) {
            Ok(call) => Some(call),
            Err(diag) => {
                diagnostics.push(diag);
                None
            }
        }
    });
    let tool_call_superseded = tool_call.is_some() && answer_span.is_some();
    if tool_call_superseded {
        diagnostics.push(DIAG_SUPERSEDED.to_string());
    }

    // Reasoning is whatever lies outside the recognized blocks.
    let mut cut: Vec<(usize, usize)> = answers
        .iter()
        .chain(calls.iter())
        .map(|b| (b.start, b.end))
        .collect();
    cut.sort_unstable();
    let mut reasoning = String::new();
    let mut pos = 0;
    for (start, end) in cut {
        if start >= pos {
            reasoning.push_str(&text[pos..start]);
            pos = end;
        }
    }
    reasoning.push_str(&text[pos..]);

    ParsedResponse {
        reasoning_text: reasoning.trim().to_string(),
        format_ok: answer_span.is_some(),
        answer_span,
        tool_call,
        tool_call_superseded,
        diagnostics,
    }
}

/// Every parseable tool call in `text`, in order. Unparseable blocks are
/// reported as `Err` at their position.
pub fn parse_all_tool_calls(text: &str) -> Vec<Result<ToolCall, String>> {
    let (calls, _) = find_blocks(text, TOOL_CALL_OPEN, TOOL_CALL_CLOSE);
    calls
        .iter()
        .map(|b| parse_tool_payload(&text[b.inner_start..b.inner_end]))
        .collect()
}

/// Splits `text` after each `</tool_call>` block. The last piece holds the
/// text after the final call (possibly empty).
pub fn split_after_tool_calls(text: &str) -> Vec<&str> {
    let (calls, _) = find_blocks(text, TOOL_CALL_OPEN, TOOL_CALL_CLOSE);
    let mut pieces = Vec::with_capacity(calls.len() + 1);
    let mut pos = 0;
    for b in calls {
        pieces.push(&text[pos..b.end]);
        pos = b.end;
    }
    pieces.push(&text[pos..]);
    pieces
}

/// Removes every `<answer>…</answer>` block.
pub fn strip_answers(text: &str) -> String {
    let (answers, _) = find_blocks(text, ANSWER_OPEN, ANSWER_CLOSE);
    let mut out = String::with_capacity(text.len());
    let mut pos = 0;
    for b in answers {
        out.push_str(&text[pos..b.start]);
        pos = b.end;
    }
    out.push_str(&text[pos..]);
    out
}

/// `<` only occurs inside JSON strings, so escaping it keeps the payload
/// equal while no argument can forge a closing tag.
pub fn render_tool_call(call: &ToolCall) -> String {
    let payload = call.to_payload().replace('<', "\\u003c");
    format!("{TOOL_CALL_OPEN}{payload}{TOOL_CALL_CLOSE}")
}

pub fn render_answer(answer: &str) -> String {
    format!("{ANSWER_OPEN}{answer}{ANSWER_CLOSE}")
}

/// Case-folded, trimmed, whitespace-collapsed form used for label matching.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedAnswer {
    pub value: String,
    /// Multiple choice: the letter names one of the options.
    pub valid: bool,
}

/// Normalizes an answer span against its question.
///
/// Multiple choice takes the first Latin letter (uppercased); a letter past
/// the last option is kept but marked invalid. Open-ended answers are
/// trimmed, whitespace-collapsed, and case-folded.
pub fn extract_answer(answer_span: &str, question: &Question) -> NormalizedAnswer {
    match question.qtype {
        QuestionType::MultipleChoice => {
            match answer_span.trim().chars().find(char::is_ascii_alphabetic) {
                Some(c) => {
                    let letter = c.to_ascii_uppercase();
                    let valid = option_index(letter).is_some_and(|i| i < question.options.len());
                    NormalizedAnswer {
                        value: letter.to_string(),
                        valid,
                    }
                }
                None => NormalizedAnswer {
                    value: String::new(),
                    valid: false,
                },
            }
        }
        QuestionType::OpenEnded => {
            let value = normalize_text(answer_span);
            NormalizedAnswer {
                valid: !value.is_empty(),
                value,
            }
        }
    }
}

/// Whether a normalized answer matches the question's gold key.
pub fn is_correct(answer: &NormalizedAnswer, question: &Question) -> bool {
    answer.valid
        && match question.qtype {
            QuestionType::MultipleChoice => answer.value == question.gold.trim().to_uppercase(),
            QuestionType::OpenEnded => answer.value == normalize_text(&question.gold),
        }
}

pub fn format_span(span: &Span) -> String {
    format!("[{:.2},{:.2}]", span.start_s, span.end_s)
}

/// Renders the textual envelope fed back to the policy after a tool call.
pub fn render_tool_result(result: &ToolResult) -> String {
    let mut out = String::new();
    out.push_str(ENVELOPE_OPEN);
    out.push_str(&format!("\ntool: {}\nstatus: {}\n", result.tool_name, result.status));
    if let Some(clip) = &result.clip {
        out.push_str(&format!(
            "span={} frames={}\n",
            format_span(&clip.span),
            clip.frame_count()
        ));
        for frame in &clip.boxes {
            out.push_str(&format!("boxes t={:.2}:", frame.t));
            for b in &frame.boxes {
                let id = b.instance_id.map(|i| format!("#{i}")).unwrap_or_default();
                out.push_str(&format!(
                    " {}{}=[{},{},{},{}]",
                    b.label, id, b.bbox[0], b.bbox[1], b.bbox[2], b.bbox[3]
                ));
            }
            out.push('\n');
        }
    }
    out.push_str(&format!("note: {}\n", result.note));
    if result.clip.is_some() && result.status == ToolStatus::Ok {
        out.push_str(VIDEO_PLACEHOLDER);
        out.push('\n');
    }
    out.push_str(ENVELOPE_CLOSE);
    out
}

/// The fields of a rendered envelope that a text-only reader can recover.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvelopeView {
    pub tool: String,
    pub status: String,
    pub note: BTreeMap<String, String>,
}

impl EnvelopeView {
    pub fn is_ok(&self) -> bool {
        self.status == ToolStatus::Ok.to_string()
    }
}

/// Parses `key=value; key=value` note text.
pub fn parse_note(note: &str) -> BTreeMap<String, String> {
    note.split(';')
        .filter_map(|field| {
            let (k, v) = field.split_once('=')?;
            Some((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

pub fn parse_tool_envelope(text: &str) -> Option<EnvelopeView> {
    let (blocks, _) = find_blocks(text, ENVELOPE_OPEN, ENVELOPE_CLOSE);
    let b = blocks.first()?;
    let body = &text[b.inner_start..b.inner_end];
    let mut tool = None;
    let mut status = None;
    let mut note = BTreeMap::new();
    for line in body.lines() {
        if let Some(v) = line.strip_prefix("tool: ") {
            tool = Some(v.trim().to_string());
        } else if let Some(v) = line.strip_prefix("status: ") {
            status = Some(v.trim().to_string());
        } else if let Some(v) = line.strip_prefix("note: ") {
            note = parse_note(v);
        }
    }
    Some(EnvelopeView {
        tool: tool?,
        status: status?,
        note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::Clip;
    use serde_json::json;

    fn mc(n: usize) -> Question {
        let options = (0..n).map(|i| format!("opt{i}")).collect();
        Question::multiple_choice("q", options, 'B')
    }

    #[test]
    fn trim_call_parses() {
        let p = parse_response(
            r#"I will trim. <tool_call>{"name":"trim","arguments":{"start_s":10,"end_s":20}}</tool_call>"#,
        );
        let call = p.tool_call.as_ref().unwrap();
        assert_eq!(call.name, "trim");
        assert_eq!(call.arguments["start_s"], json!(10));
        assert_eq!(call.arguments["end_s"], json!(20));
        assert!(p.answer_span.is_none());
        assert!(!p.format_ok);
        assert_eq!(p.reasoning_text, "I will trim.");
        assert!(p.action_call().is_some());
    }

    #[test]
    fn answer_parses() {
        let p = parse_response("It is the second. <answer>B</answer>");
        assert_eq!(p.answer_span.as_deref(), Some("B"));
        assert!(p.format_ok);
        assert!(p.tool_call.is_none());
    }

    #[test]
    fn malformed_payload_is_diagnostic() {
        let p = parse_response("<tool_call>{bad json</tool_call>");
        assert!(p.tool_call.is_none());
        assert!(!p.format_ok);
        assert!(p.diagnostics.iter().any(|d| d.starts_with(DIAG_UNPARSEABLE)));
    }

    #[test]
    fn answer_supersedes_tool() {
        let p = parse_response(
            r#"<tool_call>{"name":"trim","arguments":{}}</tool_call><answer>A</answer>"#,
        );
        assert!(p.tool_call.is_some());
        assert!(p.tool_call_superseded);
        assert!(p.action_call().is_none());
        assert!(p.diagnostics.contains(&DIAG_SUPERSEDED.to_string()));
    }

    #[test]
    fn extra_blocks_and_unclosed() {
        let p = parse_response(
            r#"<tool_call>{"name":"a","arguments":{}}</tool_call><tool_call>{"name":"b","arguments":{}}</tool_call><answer>x"#,
        );
        assert_eq!(p.tool_call.unwrap().name, "a");
        assert!(p.diagnostics.contains(&DIAG_EXTRA_TOOL_CALLS.to_string()));
        assert!(p.diagnostics.contains(&DIAG_UNCLOSED_ANSWER.to_string()));
        assert!(!p.format_ok);
    }

    #[test]
    fn tags_are_case_sensitive() {
        assert!(!parse_response("<ANSWER>B</ANSWER>").format_ok);
        assert!(!parse_response("<answer >B</answer>").format_ok);
    }

    #[test]
    fn answer_normalization() {
        let q = mc(4);
        assert_eq!(
            extract_answer(" (B) the dog ", &q),
            NormalizedAnswer {
                value: "B".into(),
                valid: true
            }
        );
        assert_eq!(extract_answer("b.", &q).value, "B");
        let e = extract_answer("E", &q);
        assert_eq!(e.value, "E");
        assert!(!e.valid);
        assert!(!is_correct(&e, &q));
        assert!(is_correct(&extract_answer("b", &q), &q));

        let open = Question {
            text: "what".into(),
            qtype: QuestionType::OpenEnded,
            options: vec![],
            gold: "A Red  Ball".into(),
        };
        let a = extract_answer("  a   red\tball ", &open);
        assert_eq!(a.value, "a red ball");
        assert!(is_correct(&a, &open));
    }

    fn ok_result() -> ToolResult {
        ToolResult {
            tool_name: "temporal_grounding".into(),
            status: ToolStatus::Ok,
            clip: Some(Clip {
                video_id: "w1".into(),
                span: Span::new(30.0, 33.0),
                frame_times: vec![30.0, 31.0, 32.0],
                boxes: vec![],
            }),
            note: "query=dog enters; span=[30.00,33.00]".into(),
        }
    }

    #[test]
    fn envelope_rendering() {
        let text = render_tool_result(&ok_result());
        assert!(text.contains("span=[30.00,33.00]"));
        assert!(text.contains(VIDEO_PLACEHOLDER));
        assert_eq!(text, render_tool_result(&ok_result()));

        let failed = ToolResult {
            tool_name: "temporal_grounding".into(),
            status: ToolStatus::NotFound,
            clip: None,
            note: "error=no matching event".into(),
        };
        let text = render_tool_result(&failed);
        assert!(text.contains("no matching event"));
        assert!(!text.contains(VIDEO_PLACEHOLDER));
    }

    #[test]
    fn envelope_parses_back() {
        let view = parse_tool_envelope(&render_tool_result(&ok_result())).unwrap();
        assert_eq!(view.tool, "temporal_grounding");
        assert!(view.is_ok());
        assert_eq!(view.note["query"], "dog enters");
        assert_eq!(view.note["span"], "[30.00,33.00]");
    }

    #[test]
    fn splitting_and_stripping() {
        let text = r#"a <tool_call>{"name":"x","arguments":{}}</tool_call> b <tool_call>{"name":"y","arguments":{}}</tool_call> c <answer>B</answer>"#;
        let pieces = split_after_tool_calls(text);
        assert_eq!(pieces.len(), 3);
        assert!(pieces[0].ends_with("</tool_call>"));
        assert_eq!(pieces.concat(), text);
        let all = parse_all_tool_calls(text);
        assert_eq!(all.len(), 2);
        assert_eq!(all[1].as_ref().unwrap().name, "y");
        assert!(!strip_answers(text).contains("<answer>"));
    }
}
