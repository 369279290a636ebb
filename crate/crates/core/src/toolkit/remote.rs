//! Tool backend that forwards invocations to a model server.
//!
//! Request: `{"tool", "arguments", "video", "span"}`. Response:
//! `{"status", "spans", "boxes", "note"}`. The returned spans are
//! resampled on the engine's own 1 fps grid and capped like oracle clips.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{clip_over, note, Invocation, ToolBackend, ToolConfig, ToolResult, ToolStatus};
use crate::history::{BBox, FrameBoxes, LabeledBox, Span, VideoMeta};
use crate::http::HttpClient;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteToolRequest {
    pub tool: String,
    pub arguments: Map<String, Value>,
    pub video: String,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteBox {
    pub t: f64,
    pub label: String,
    #[serde(default)]
    pub instance_id: Option<u32>,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteToolResponse {
    pub status: ToolStatus,
    #[serde(default)]
    pub spans: Vec<Span>,
    #[serde(default)]
    pub boxes: Vec<RemoteBox>,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone)]
pub struct RemoteToolBackend {
    url: String,
    client: HttpClient,
}

impl RemoteToolBackend {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
    pub const DEFAULT_RETRIES: u32 = 2;

    pub fn new(url: impl Into<String>, timeout: Duration, retries: u32) -> Self {
        Self {
            url: url.into(),
            client: HttpClient::new(timeout, retries),
        }
    }

    pub fn request_for(video: &VideoMeta, invocation: &Invocation) -> RemoteToolRequest {
        RemoteToolRequest {
            tool: invocation.tool().to_string(),
            arguments: invocation.arguments(),
            video: video.video_id.clone(),
            span: invocation.span(),
        }
    }
}

/// Converts a backend reply into a result clipped to the requested span.
pub fn result_from_response(
    video: &VideoMeta,
    invocation: &Invocation,
    response: RemoteToolResponse,
    config: &ToolConfig,
) -> ToolResult {
    let tool = invocation.tool();
    if response.status != ToolStatus::Ok {
        return ToolResult::failure(tool.as_str(), response.status, response.note);
    }
    let request_span = invocation.span();
    let mut spans: Vec<Span> = response
        .spans
        .iter()
        .filter_map(|s| s.intersect(&request_span))
        .collect();
    spans.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    let mut frames: Vec<FrameBoxes> = Vec::new();
    for b in response.boxes {
        let labeled = LabeledBox {
            label: b.label,
            instance_id: b.instance_id,
            bbox: b.bbox,
        };
        match frames.iter_mut().find(|f| (f.t - b.t).abs() < 1e-9) {
            Some(f) => f.boxes.push(labeled),
            None => frames.push(FrameBoxes {
                t: b.t,
                boxes: vec![labeled],
            }),
        }
    }
    frames.sort_by(|a, b| a.t.total_cmp(&b.t));
    match clip_over(&video.video_id, &spans, frames, config.max_tool_frames) {
        Some(clip) => ToolResult::ok(tool, clip, response.note),
        None => ToolResult::failure(
            tool.as_str(),
            ToolStatus::NotFound,
            note(&[("error", "backend returned no span inside the request")]),
        ),
    }
}

impl ToolBackend for RemoteToolBackend {
    fn execute(&self, video: &VideoMeta, invocation: &Invocation, config: &ToolConfig) -> ToolResult {
        let request = Self::request_for(video, invocation);
        match self.client.post_json::<_, RemoteToolResponse>(&self.url, &request) {
            Ok(response) => result_from_response(video, invocation, response, config),
            Err(e) => ToolResult::failure(
                invocation.tool().as_str(),
                ToolStatus::NotFound,
                note(&[("error", &format!("backend unavailable: {e}"))]),
            ),
        }
    }
}
