//! Recorded generation sessions: an append-only JSONL file mapping
//! request cache keys to responses, written while a live run executes
//! and read back to serve deterministic replays.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendError, BackendReply, GenerationRequest};

pub const SESSION_SCHEMA: &str = "atomchain.session.v1";

/// One recorded exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEntry {
    pub schema: String,
    pub key: String,
    pub request: GenerationRequest,
    pub response: BackendReply,
}

/// In-memory view of a recorded session, keyed by request cache key.
/// Later records for the same key win, so a re-recorded session file
/// supersedes its earlier entries.
#[derive(Debug, Default)]
pub struct SessionStore {
    entries: BTreeMap<String, SessionEntry>,
}

impl SessionStore {
    /// Loads a session file. A truncated or garbled final line (the
    /// signature of a crashed writer) is tolerated and skipped; garbage
    /// anywhere else is an error.
    pub fn load(path: &Path) -> Result<SessionStore, BackendError> {
        let file = File::open(path)?;
        let mut lines = BufReader::new(file).lines().collect::<Result<Vec<_>, _>>()?;
        while lines.last().is_some_and(|l| l.trim().is_empty()) {
            lines.pop();
        }
        let mut entries = BTreeMap::new();
        let count = lines.len();
        for (i, line) in lines.into_iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<SessionEntry>(&line) {
                Ok(entry) => {
                    if entry.schema != SESSION_SCHEMA {
                        return Err(BackendError::Malformed(format!(
                            "line {}: unsupported session schema {:?}",
                            i + 1,
                            entry.schema
                        )));
                    }
                    entries.insert(entry.key.clone(), entry);
                }
                Err(err) if i + 1 == count => {
                    // Interrupted final write; everything before it is
                    // intact and usable.
                    let _ = err;
                }
                Err(err) => {
                    return Err(BackendError::Malformed(format!("line {}: {err}", i + 1)));
                }
            }
        }
        Ok(SessionStore { entries })
    }

    pub fn get(&self, key: &str) -> Option<&SessionEntry> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &SessionEntry> {
        self.entries.values()
    }
}

/// Append-only session writer, safe to share across worker threads.
/// Each record is one line, flushed before the lock is released, so a
/// crash can corrupt at most the final line.
pub struct SessionSink {
    file: Mutex<File>,
}

impl SessionSink {
    /// Opens for appending, creating the file if needed.
    pub fn open(path: &Path) -> Result<SessionSink, BackendError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(SessionSink { file: Mutex::new(file) })
    }

    pub fn record(
        &self,
        key: &str,
        request: &GenerationRequest,
        response: &BackendReply,
    ) -> Result<(), BackendError> {
        let entry = SessionEntry {
            schema: SESSION_SCHEMA.to_string(),
            key: key.to_string(),
            request: request.clone(),
            response: response.clone(),
        };
        let line = serde_json::to_string(&entry)
            .map_err(|err| BackendError::Malformed(err.to_string()))?;
        let mut file = self.file.lock().unwrap();
        writeln!(file, "{line}")?;
        file.flush()?;
        Ok(())
    }
}
