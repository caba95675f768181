//! Append-only JSONL stores. Every line self-describes its schema; a
//! truncated final line (the signature of a killed writer) is repaired
//! by trimming it, so a resumed run recomputes that item and appends a
//! clean record.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use atomchain::claimgen::{AdjudicationEntry, ADJUDICATION_SCHEMA};
use atomchain::orchestrator::{VerificationRecord, RECORD_SCHEMA};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("{path}:{line}: unsupported schema {found:?}, expected {expected:?}")]
    Schema { path: String, line: usize, found: String, expected: String },
}

/// One JSONL file holding records of a single schema.
pub struct JsonlStore {
    path: PathBuf,
    schema: &'static str,
}

impl JsonlStore {
    pub fn records(path: impl Into<PathBuf>) -> JsonlStore {
        JsonlStore { path: path.into(), schema: RECORD_SCHEMA }
    }

    pub fn adjudications(path: impl Into<PathBuf>) -> JsonlStore {
        JsonlStore { path: path.into(), schema: ADJUDICATION_SCHEMA }
    }

    fn io_err(&self, source: std::io::Error) -> StoreError {
        StoreError::Io { path: self.path.display().to_string(), source }
    }

    /// Loads every complete record. A missing file is an empty store. A
    /// garbled final line is trimmed off the file (interrupted write);
    /// garbage anywhere else is an error.
    pub fn load<T: DeserializeOwned>(&self) -> Result<Vec<T>, StoreError> {
        let text = match std::fs::read_to_string(&self.path) {
            Ok(text) => text,
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(err) => return Err(self.io_err(err)),
        };
        let mut records = Vec::new();
        let mut clean_bytes = 0usize;
        let mut lines = text.split_inclusive('\n').enumerate().peekable();
        while let Some((i, raw)) = lines.next() {
            let line = raw.trim_end_matches('\n');
            if line.trim().is_empty() {
                clean_bytes += raw.len();
                continue;
            }
            let last = lines.peek().is_none();
            let value: serde_json::Value = match serde_json::from_str(line) {
                Ok(value) => value,
                Err(err) if last => {
                    // Interrupted final write: drop it so later appends
                    // leave a fully parseable store.
                    let _ = err;
                    self.truncate_to(clean_bytes)?;
                    break;
                }
                Err(err) => {
                    return Err(StoreError::Malformed {
                        path: self.path.display().to_string(),
                        line: i + 1,
                        message: err.to_string(),
                    });
                }
            };
            let found = value.get("schema").and_then(|v| v.as_str()).unwrap_or_default();
            if found != self.schema {
                return Err(StoreError::Schema {
                    path: self.path.display().to_string(),
                    line: i + 1,
                    found: found.to_string(),
                    expected: self.schema.to_string(),
                });
            }
            let record: T =
                serde_json::from_value(value).map_err(|err| StoreError::Malformed {
                    path: self.path.display().to_string(),
                    line: i + 1,
                    message: err.to_string(),
                })?;
            records.push(record);
            clean_bytes += raw.len();
        }
        Ok(records)
    }

    fn truncate_to(&self, bytes: usize) -> Result<(), StoreError> {
        let file = OpenOptions::new().write(true).open(&self.path).map_err(|e| self.io_err(e))?;
        file.set_len(bytes as u64).map_err(|e| self.io_err(e))
    }

    /// Ids of the verification records already present, for resuming.
    pub fn existing_ids(&self) -> Result<BTreeSet<String>, StoreError> {
        let records: Vec<VerificationRecord> = self.load()?;
        Ok(records.into_iter().map(|record| record.claim_id).collect())
    }

    /// Opens the store for appending; each append writes one line and
    /// flushes so a killed process loses at most the line in flight.
    pub fn appender(&self) -> Result<Appender, StoreError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| self.io_err(e))?;
        Ok(Appender { file })
    }

    pub fn append<T: Serialize>(&self, value: &T) -> Result<(), StoreError> {
        let mut appender = self.appender()?;
        appender.append(value).map_err(|e| self.io_err(e))
    }
}

pub struct Appender {
    file: File,
}

impl Appender {
    pub fn append<T: Serialize>(&mut self, value: &T) -> std::io::Result<()> {
        let line = serde_json::to_string(value)
            .map_err(|err| std::io::Error::new(std::io::ErrorKind::InvalidData, err))?;
        self.file.write_all(line.as_bytes())?;
        self.file.write_all(b"\n")?;
        self.file.flush()
    }
}

/// Appends one adjudication entry.
pub fn append_adjudication(path: &Path, entry: &AdjudicationEntry) -> Result<(), StoreError> {
    JsonlStore::adjudications(path).append(entry)
}
