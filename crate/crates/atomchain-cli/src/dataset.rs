//! JSONL claim datasets: one self-describing entry per line, binary
//! gold labels, tables in row-text form.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use atomchain::orchestrator::BatchItem;
use atomchain::table::{Table, TableError};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DATASET_SCHEMA: &str = "atomchain.dataset.v1";

/// Scientific domain an entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Ml,
    Material,
    Medical,
    Finance,
    Other,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Domain::Ml => "ml",
            Domain::Material => "material",
            Domain::Medical => "medical",
            Domain::Finance => "finance",
            Domain::Other => "other",
        };
        f.write_str(name)
    }
}

/// Binary gold label; NOT_ENOUGH_INFO exists only in predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GoldLabel {
    Support,
    Refute,
}

impl GoldLabel {
    pub fn as_bool(self) -> bool {
        matches!(self, GoldLabel::Support)
    }
}

/// Where an entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    Generated,
    Imported,
    Human,
}

/// One dataset line: a table, one claim about it, and the gold label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub schema: String,
    pub id: String,
    pub domain: Domain,
    pub caption: String,
    pub rows: Vec<Vec<String>>,
    pub claim: String,
    pub label: GoldLabel,
    pub provenance: Provenance,
    /// Machine-checkable form of the claim, when one exists (printed
    /// check expression).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check: Option<String>,
}

impl DatasetEntry {
    pub fn new(
        id: impl Into<String>,
        domain: Domain,
        table: &Table,
        claim: impl Into<String>,
        label: GoldLabel,
        provenance: Provenance,
    ) -> DatasetEntry {
        DatasetEntry {
            schema: DATASET_SCHEMA.to_string(),
            id: id.into(),
            domain,
            caption: table.caption.clone(),
            rows: table.row_texts(),
            claim: claim.into(),
            label,
            provenance,
            check: None,
        }
    }

    /// Rebuilds the table from its row texts.
    pub fn table(&self) -> Result<Table, TableError> {
        Table::from_rows(&self.caption, &self.rows, 1)
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("{path}:{line}: unsupported dataset schema {found:?}")]
    Schema { path: String, line: usize, found: String },
    #[error("{path}:{line}: duplicate entry id {id:?}")]
    DuplicateId { path: String, line: usize, id: String },
    #[error("entry {id}: bad table: {source}")]
    Table {
        id: String,
        #[source]
        source: TableError,
    },
}

/// Loads a dataset file, preserving entry order. Ids must be unique
/// within the file; unknown JSON fields are ignored.
pub fn load_dataset(path: &Path) -> Result<Vec<DatasetEntry>, DatasetError> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path)
        .map_err(|source| DatasetError::Io { path: display.clone(), source })?;
    let mut entries = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: DatasetEntry =
            serde_json::from_str(line).map_err(|err| DatasetError::Malformed {
                path: display.clone(),
                line: i + 1,
                message: err.to_string(),
            })?;
        if entry.schema != DATASET_SCHEMA {
            return Err(DatasetError::Schema {
                path: display.clone(),
                line: i + 1,
                found: entry.schema,
            });
        }
        if !seen.insert(entry.id.clone()) {
            return Err(DatasetError::DuplicateId {
                path: display.clone(),
                line: i + 1,
                id: entry.id,
            });
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Writes entries in order, one canonical JSON line each.
pub fn save_dataset(path: &Path, entries: &[DatasetEntry]) -> Result<(), DatasetError> {
    let display = path.display().to_string();
    let mut out = Vec::new();
    for entry in entries {
        let line = serde_json::to_string(entry).expect("dataset entries are serializable");
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    let mut file = fs::File::create(path)
        .map_err(|source| DatasetError::Io { path: display.clone(), source })?;
    file.write_all(&out).map_err(|source| DatasetError::Io { path: display, source })
}

/// Converts entries into batch work items, building each table.
pub fn batch_items(entries: &[DatasetEntry]) -> Result<Vec<BatchItem>, DatasetError> {
    entries
        .iter()
        .map(|entry| {
            let table = entry
                .table()
                .map_err(|source| DatasetError::Table { id: entry.id.clone(), source })?;
            Ok(BatchItem {
                id: entry.id.clone(),
                domain: entry.domain.to_string(),
                table,
                claim: entry.claim.clone(),
                gold: Some(entry.label.as_bool()),
            })
        })
        .collect()
}
