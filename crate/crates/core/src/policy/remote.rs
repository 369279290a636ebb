//! Policy served by an OpenAI-style chat-completion endpoint.
//!
//! Visual segments are sent as `image_url` parts with `frame://` URIs; the
//! server resolves them to decoded frames.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{PolicyBackend, PolicyError, PolicyRequest};
use crate::history::{ContextView, Role, Segment};
use crate::http::HttpClient;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Clone, Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Debug, Clone, Deserialize)]
struct ChatReply {
    content: Option<String>,
}

fn frame_parts(video_id: &str, times: &[f64]) -> Vec<Value> {
    times
        .iter()
        .map(|t| json!({"type": "image_url", "image_url": {"url": format!("frame://{video_id}?t={t:.3}")}}))
        .collect()
}

/// Converts a context into chat messages. Tool output and clips become user
/// turns; consecutive user parts are merged.
pub fn chat_messages(context: &ContextView) -> Vec<ChatMessage> {
    let mut messages: Vec<ChatMessage> = Vec::new();
    let mut pending: Vec<Value> = Vec::new();
    let flush = |messages: &mut Vec<ChatMessage>, pending: &mut Vec<Value>| {
        if !pending.is_empty() {
            messages.push(ChatMessage {
                role: "user".into(),
                content: Value::Array(std::mem::take(pending)),
            });
        }
    };
    for seg in context.segments() {
        match seg {
            Segment::Prompt {
                system, question, ..
            } => {
                messages.push(ChatMessage {
                    role: "system".into(),
                    content: Value::from(system.as_str()),
                });
                pending.push(json!({"type": "text", "text": question}));
            }
            Segment::Visual { clip, caption, .. } => {
                if !caption.is_empty() {
                    pending.push(json!({"type": "text", "text": caption}));
                }
                pending.extend(frame_parts(&clip.video_id, &clip.frame_times));
            }
            Segment::Text {
                role: Role::Tool,
                text,
                ..
            } => pending.push(json!({"type": "text", "text": text})),
            Segment::Text {
                role: Role::Assistant,
                text,
                ..
            } => {
                flush(&mut messages, &mut pending);
                messages.push(ChatMessage {
                    role: "assistant".into(),
                    content: Value::from(text.as_str()),
                });
            }
        }
    }
    flush(&mut messages, &mut pending);
    messages
}

#[derive(Debug, Clone)]
pub struct RemotePolicy {
    url: String,
    model: String,
    client: HttpClient,
}

impl RemotePolicy {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
    pub const DEFAULT_RETRIES: u32 = 2;

    pub fn new(url: impl Into<String>, model: impl Into<String>, timeout: Duration, retries: u32) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            client: HttpClient::new(timeout, retries),
        }
    }

    pub fn with_defaults(url: impl Into<String>) -> Self {
        Self::new(url, "weaver", Self::DEFAULT_TIMEOUT, Self::DEFAULT_RETRIES)
    }

    pub fn request_body(&self, request: &PolicyRequest<'_>) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages: chat_messages(request.context),
            temperature: request.sampling.temperature,
            top_p: request.sampling.top_p,
            max_tokens: request.sampling.max_new_tokens,
            seed: request.sampling.seed,
        }
    }
}

impl PolicyBackend for RemotePolicy {
    fn next_response(&self, request: &PolicyRequest<'_>) -> Result<String, PolicyError> {
        let body = self.request_body(request);
        let reply: ChatResponse = self
            .client
            .post_json(&self.url, &body)
            .map_err(PolicyError::Transport)?;
        reply
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| PolicyError::Transport("response has no choices[0].message.content".into()))
    }
}
