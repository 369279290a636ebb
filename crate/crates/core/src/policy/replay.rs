//! Record and replay policy responses keyed by a digest of the context.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PolicyBackend, PolicyError, PolicyProvider, PolicyRequest};
use crate::history::{ContextView, Role, Segment};
use crate::synthworld::Task;

/// Stable hex digest of everything a policy can see in a context.
pub fn context_digest(context: &ContextView) -> String {
    let mut h = Sha256::new();
    let mut field = |bytes: &[u8]| {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    for seg in context.segments() {
        match seg {
            Segment::Prompt {
                system, question, ..
            } => {
                field(b"prompt");
                field(system.as_bytes());
                field(question.as_bytes());
            }
            Segment::Text { role, text, .. } => {
                field(b"text");
                field(match role {
                    Role::Assistant => b"assistant",
                    Role::Tool => b"tool",
                });
                field(text.as_bytes());
            }
            Segment::Visual { clip, caption, .. } => {
                field(b"visual");
                field(clip.video_id.as_bytes());
                field(&clip.span.start_s.to_le_bytes());
                field(&clip.span.end_s.to_le_bytes());
                field(&(clip.frame_times.len() as u64).to_le_bytes());
                field(caption.as_bytes());
            }
        }
    }
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub digest: String,
    pub response: String,
}

/// Serves responses from a JSONL log; unknown contexts are an error.
#[derive(Debug, Clone, Default)]
pub struct ReplayPolicy {
    entries: HashMap<String, String>,
}

impl ReplayPolicy {
    pub fn from_entries(entries: impl IntoIterator<Item = ReplayEntry>) -> Self {
        Self {
            entries: entries.into_iter().map(|e| (e.digest, e.response)).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let file = File::open(path)
            .map_err(|e| PolicyError::Log(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| PolicyError::Log(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ReplayEntry = serde_json::from_str(&line)
                .map_err(|e| PolicyError::Log(format!("{}:{}: {e}", path.display(), i + 1)))?;
            entries.push(entry);
        }
        Ok(Self::from_entries(entries))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl PolicyBackend for ReplayPolicy {
    fn next_response(&self, request: &PolicyRequest<'_>) -> Result<String, PolicyError> {
        let digest = context_digest(request.context);
        self.entries
            .get(&digest)
            .cloned()
            .ok_or(PolicyError::ReplayMiss(digest))
    }
}

fn open_log(path: &Path) -> Result<Arc<Mutex<File>>, PolicyError> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| PolicyError::Log(format!("{}: {e}", path.display())))?;
    Ok(Arc::new(Mutex::new(file)))
}

/// Wraps a backend and appends every exchange to a JSONL log.
pub struct RecordingPolicy<P> {
    inner: P,
    sink: Arc<Mutex<File>>,
}

impl<P: PolicyBackend> RecordingPolicy<P> {
    pub fn new(inner: P, path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        Ok(Self {
            inner,
            sink: open_log(path.as_ref())?,
        })
    }
}

impl<P: PolicyBackend> PolicyBackend for RecordingPolicy<P> {
    fn next_response(&self, request: &PolicyRequest<'_>) -> Result<String, PolicyError> {
        let response = self.inner.next_response(request)?;
        let entry = ReplayEntry {
            digest: context_digest(request.context),
            response: response.clone(),
        };
        let mut line = serde_json::to_string(&entry).map_err(|e| PolicyError::Log(e.to_string()))?;
        line.push('\n');
        let mut sink = self.sink.lock().map_err(|_| PolicyError::Log("poisoned".into()))?;
        sink.write_all(line.as_bytes())
            .map_err(|e| PolicyError::Log(e.to_string()))?;
        Ok(response)
    }
}

/// Records every policy a provider hands out into one shared log.
pub struct RecordingProvider {
    inner: Arc<dyn PolicyProvider>,
    sink: Arc<Mutex<File>>,
}

impl RecordingProvider {
    pub fn new(inner: Arc<dyn PolicyProvider>, path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        Ok(Self {
            inner,
            sink: open_log(path.as_ref())?,
        })
    }
}

impl PolicyProvider for RecordingProvider {
    fn policy_for(&self, task: &Task) -> Result<Arc<dyn PolicyBackend>, PolicyError> {
        Ok(Arc::new(RecordingPolicy {
            inner: self.inner.policy_for(task)?,
            sink: Arc::clone(&self.sink),
        }))
    }
}
