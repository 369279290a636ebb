//! Policy backends: given an assembled context, produce the next response.
//!
//! Backends only ever see a [`ContextView`]. Scripted test doubles that
//! need task knowledge get it when they are built, through a
//! [`PolicyProvider`], never from the world itself.

pub mod remote;
pub mod replay;
pub mod scripted;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::history::ContextView;
use crate::synthworld::Task;
use crate::toolkit::render_tool_docs;

pub use remote::RemotePolicy;
pub use replay::{context_digest, RecordingPolicy, RecordingProvider, ReplayPolicy};
pub use scripted::{fallback_policy_for, oracle_policy_for, oracle_rewrite_for, ScriptedPolicy, ScriptedProvider};

pub const SYSTEM_PROMPT_TEMPLATE: &str = include_str!("../../prompts/system_prompt.txt");
pub const CONSTRUCT_PROMPT_TEMPLATE: &str = include_str!("../../prompts/construct_prompt.txt");

/// System prompt with the tool documentation filled in.
pub fn system_prompt(template: &str) -> String {
    template.replace("{tool_docs}", &render_tool_docs())
}

pub fn default_system_prompt() -> String {
    system_prompt(SYSTEM_PROMPT_TEMPLATE)
}

/// Rewriting prompt for dataset construction.
pub fn construct_prompt(template: &str, question: &str, cot: &str) -> String {
    template
        .replace("{tool_docs}", &render_tool_docs())
        .replace("{question}", question)
        .replace("{cot}", cot)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("policy transport failed: {0}")]
    Transport(String),
    #[error("no recorded response for context digest {0}")]
    ReplayMiss(String),
    #[error("invalid policy request: {0}")]
    InvalidRequest(String),
    #[error("cannot build policy: {0}")]
    Construction(String),
    #[error("replay log: {0}")]
    Log(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            max_new_tokens: 2048,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PolicyRequest<'a> {
    pub context: &'a ContextView,
    pub sampling: SamplingParams,
    /// Zero-based turn within the episode.
    pub turn: usize,
}

impl PolicyRequest<'_> {
    pub fn validate(&self, max_response_tokens: usize) -> Result<(), PolicyError> {
        if self.sampling.max_new_tokens == 0 || self.sampling.max_new_tokens > max_response_tokens {
            return Err(PolicyError::InvalidRequest(format!(
                "max_new_tokens {} outside 1..={max_response_tokens}",
                self.sampling.max_new_tokens
            )));
        }
        Ok(())
    }
}

pub trait PolicyBackend: Send + Sync {
    fn next_response(&self, request: &PolicyRequest<'_>) -> Result<String, PolicyError>;
}

impl<P: PolicyBackend + ?Sized> PolicyBackend for Arc<P> {
    fn next_response(&self, request: &PolicyRequest<'_>) -> Result<String, PolicyError> {
        (**self).next_response(request)
    }
}

/// Hands out the policy used for a given task.
pub trait PolicyProvider: Send + Sync {
    fn policy_for(&self, task: &Task) -> Result<Arc<dyn PolicyBackend>, PolicyError>;
}

/// Every task shares one backend.
#[derive(Clone)]
pub struct SharedPolicy(pub Arc<dyn PolicyBackend>);

impl PolicyProvider for SharedPolicy {
    fn policy_for(&self, _task: &Task) -> Result<Arc<dyn PolicyBackend>, PolicyError> {
        Ok(Arc::clone(&self.0))
    }
}

impl<F> PolicyProvider for F
where
    F: Fn(&Task) -> Result<Arc<dyn PolicyBackend>, PolicyError> + Send + Sync,
{
    fn policy_for(&self, task: &Task) -> Result<Arc<dyn PolicyBackend>, PolicyError> {
        self(task)
    }
}
