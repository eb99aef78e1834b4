//! Record/replay cassettes: JSONL logs of request/response pairs that make
//! every pipeline run reproducible with zero live network.
//!
//! One line per exchange: `{"request": <ChatRequest>, "response":
//! <ChatResponse>}`. Replay matches on the canonical request JSON; repeated
//! identical requests consume recorded responses in order.

use super::{ChatRequest, ChatResponse, ChatTransport, ClientError};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

#[derive(Debug, Serialize, Deserialize)]
struct CassetteEntry {
    request: ChatRequest,
    response: ChatResponse,
}

/// Wraps a live transport and appends every successful exchange to a
/// cassette file.
pub struct CassetteRecorder {
    inner: Arc<dyn ChatTransport>,
    writer: Mutex<BufWriter<File>>,
}

impl CassetteRecorder {
    pub fn create(path: &Path, inner: Arc<dyn ChatTransport>) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        Ok(Self {
            inner,
            writer: Mutex::new(BufWriter::new(File::create(path)?)),
        })
    }
}

impl ChatTransport for CassetteRecorder {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let response = self.inner.complete(request)?;
        let entry = CassetteEntry { request: request.clone(), response: response.clone() };
        let line = serde_json::to_string(&entry).expect("cassette entry serialization");
        let mut writer = self.writer.lock().unwrap();
        let _ = writeln!(writer, "{line}");
        let _ = writer.flush();
        Ok(response)
    }
}

/// Replays a recorded cassette; any unrecorded request is a
/// [`ClientError::CassetteMiss`].
pub struct CassetteReplayer {
    entries: Mutex<HashMap<String, VecDeque<ChatResponse>>>,
}

impl CassetteReplayer {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut entries: HashMap<String, VecDeque<ChatResponse>> = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{}:{}: {e}", path.display(), i + 1),
                )
            })?;
            entries
                .entry(entry.request.canonical_json())
                .or_default()
                .push_back(entry.response);
        }
        Ok(Self { entries: Mutex::new(entries) })
    }

    /// Builds a replayer from in-memory exchanges (test fixtures).
    pub fn from_exchanges(pairs: Vec<(ChatRequest, ChatResponse)>) -> Self {
        let mut entries: HashMap<String, VecDeque<ChatResponse>> = HashMap::new();
        for (request, response) in pairs {
            entries.entry(request.canonical_json()).or_default().push_back(response);
        }
        Self { entries: Mutex::new(entries) }
    }
}

impl ChatTransport for CassetteReplayer {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let key = request.canonical_json();
        let mut entries = self.entries.lock().unwrap();
        match entries.get_mut(&key).and_then(|q| q.pop_front()) {
            Some(response) => Ok(response),
            None => {
                let last_user = request
                    .messages
                    .iter()
                    .rev()
                    .find_map(|m| {
                        m.content.iter().find_map(|p| match p {
                            super::WirePart::Text { text } => Some(text.as_str()),
                            _ => None,
                        })
                    })
                    .unwrap_or("<no text part>");
                Err(ClientError::CassetteMiss(format!(
                    "model={} last_text={:.80}",
                    request.model, last_user
                )))
            }
        }
    }
}
