//! Pipe-delimited table model with exact decimal cell values.
//!
//! Tables arrive as one line per row, cells separated by `|`, with an
//! optional leading `[BOLD] ` emphasis marker per cell. Addressing is
//! absolute and 1-indexed: row 1 is the first physical line (usually the
//! header row), column 1 the first cell of each line. Numeric cell values
//! are kept as decimals at their printed precision, never as binary
//! floats, so `13.0` stays `13.0`.

use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Leading marker carried by emphasized cells in the wire format.
pub const EMPHASIS_MARKER: &str = "[BOLD]";

/// Which axis an out-of-range index referred to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Row,
    Col,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Axis::Row => write!(f, "row"),
            Axis::Col => write!(f, "col"),
        }
    }
}

#[derive(Debug, Error)]
pub enum TableError {
    #[error("table source is empty")]
    EmptyInput,
    #[error("table source has no pipe-delimited lines")]
    NoDelimitedLines,
    #[error("{axis} {index} out of range 1..={extent}")]
    OutOfRange { axis: Axis, index: usize, extent: usize },
    #[error("no {axis} matches {query:?}")]
    NotFound { axis: Axis, query: String },
    #[error("{axis} lookup {query:?} is ambiguous: matches positions {candidates:?}")]
    Ambiguous { axis: Axis, query: String, candidates: Vec<usize> },
    #[error("header row count {given} exceeds table row count {rows}")]
    HeaderRowsExceedTable { given: usize, rows: usize },
}

/// Non-fatal oddities noticed while parsing a table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseWarning {
    /// A row had fewer cells than the widest row and was padded with
    /// empty cells.
    RaggedRow { row: usize, found: usize, expected: usize },
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseWarning::RaggedRow { row, found, expected } => write!(
                f,
                "row {row} has {found} cells, padded to {expected}"
            ),
        }
    }
}

/// An exact decimal with an optional normalized unit string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quantity {
    pub value: Decimal,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

impl Quantity {
    pub fn new(value: Decimal) -> Self {
        Quantity { value, unit: None }
    }

    pub fn with_unit(value: Decimal, unit: &str) -> Self {
        Quantity { value, unit: Some(normalize_unit(unit)) }
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.unit.as_deref() {
            // Percent signs attach directly; word units get a space.
            Some("%") => write!(f, "{}%", self.value),
            Some(unit) => write!(f, "{} {}", self.value, unit),
            None => write!(f, "{}", self.value),
        }
    }
}

/// What a cell's text denotes once parsed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CellValue {
    Number { value: Decimal, #[serde(default, skip_serializing_if = "Option::is_none")] unit: Option<String> },
    Text,
    Empty,
}

/// One table cell: the text as printed (emphasis marker stripped), an
/// emphasis flag, and the parsed value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub raw_text: String,
    pub emphasis: bool,
    pub value: CellValue,
}

impl Cell {
    /// Builds a cell from one wire-format field (already `|`-split).
    pub fn parse(field: &str) -> Cell {
        let trimmed = field.trim();
        let (emphasis, text) = match trimmed.strip_prefix(EMPHASIS_MARKER) {
            Some(rest) => (true, rest.trim_start()),
            None => (false, trimmed),
        };
        let value = if text.is_empty() {
            CellValue::Empty
        } else {
            match parse_quantity(text) {
                Some(q) => CellValue::Number { value: q.value, unit: q.unit },
                None => CellValue::Text,
            }
        };
        Cell { raw_text: text.to_string(), emphasis, value }
    }

    /// The cell's numeric value, when it has one.
    pub fn quantity(&self) -> Option<Quantity> {
        match &self.value {
            CellValue::Number { value, unit } => {
                Some(Quantity { value: *value, unit: unit.clone() })
            }
            _ => None,
        }
    }

    fn render(&self) -> String {
        if self.emphasis {
            format!("{} {}", EMPHASIS_MARKER, self.raw_text)
        } else {
            self.raw_text.clone()
        }
    }
}

/// Absolute 1-indexed cell address, counted from the first physical line
/// and the first cell of each line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellAddress {
    pub row: usize,
    pub col: usize,
}

impl CellAddress {
    pub fn new(row: usize, col: usize) -> Self {
        CellAddress { row, col }
    }
}

impl fmt::Display for CellAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

/// A rectangular grid of cells with a caption.
///
/// Invariants: at least one row and one column, every row has the same
/// width, `header_rows <= rows`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub caption: String,
    cells: Vec<Vec<Cell>>,
    header_rows: usize,
}

impl Table {
    /// Parses wire-format text into a table. Blank lines are skipped;
    /// rows narrower than the widest row are padded with empty cells and
    /// reported as warnings. The header row count defaults to 1.
    pub fn parse(caption: &str, source: &str) -> Result<(Table, Vec<ParseWarning>), TableError> {
        if source.trim().is_empty() {
            return Err(TableError::EmptyInput);
        }
        let mut rows: Vec<Vec<Cell>> = Vec::new();
        for line in source.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if !line.contains('|') {
                continue;
            }
            let mut fields: Vec<&str> = line.split('|').collect();
            // A leading/trailing `|` produces empty edge fields that are
            // delimiters, not cells.
            if fields.first().is_some_and(|f| f.trim().is_empty()) && line.starts_with('|') {
                fields.remove(0);
            }
            if fields.last().is_some_and(|f| f.trim().is_empty()) && line.ends_with('|') {
                fields.pop();
            }
            if fields.is_empty() {
                continue;
            }
            rows.push(fields.into_iter().map(Cell::parse).collect());
        }
        if rows.is_empty() {
            return Err(TableError::NoDelimitedLines);
        }
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut warnings = Vec::new();
        for (i, row) in rows.iter_mut().enumerate() {
            if row.len() < width {
                warnings.push(ParseWarning::RaggedRow {
                    row: i + 1,
                    found: row.len(),
                    expected: width,
                });
                while row.len() < width {
                    row.push(Cell::parse(""));
                }
            }
        }
        Ok((
            Table { caption: caption.to_string(), cells: rows, header_rows: 1 },
            warnings,
        ))
    }

    /// Builds a table from pre-split row texts (the JSON dataset form).
    pub fn from_rows(
        caption: &str,
        rows: &[Vec<String>],
        header_rows: usize,
    ) -> Result<Table, TableError> {
        if rows.is_empty() || rows.iter().all(|r| r.is_empty()) {
            return Err(TableError::EmptyInput);
        }
        let width = rows.iter().map(Vec::len).max().unwrap_or(0);
        let cells = rows
            .iter()
            .map(|r| {
                let mut row: Vec<Cell> = r.iter().map(|f| Cell::parse(f)).collect();
                while row.len() < width {
                    row.push(Cell::parse(""));
                }
                row
            })
            .collect::<Vec<_>>();
        if header_rows > cells.len() {
            return Err(TableError::HeaderRowsExceedTable { given: header_rows, rows: cells.len() });
        }
        Ok(Table { caption: caption.to_string(), cells, header_rows })
    }

    /// Renders back to wire format; the inverse of [`Table::parse`] for
    /// canonical cell texts.
    pub fn render(&self) -> String {
        self.cells
            .iter()
            .map(|row| {
                let fields: Vec<String> = row.iter().map(Cell::render).collect();
                format!("| {} |", fields.join(" | "))
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Canonical cell texts row by row; the JSON dataset form of the
    /// table body.
    pub fn row_texts(&self) -> Vec<Vec<String>> {
        self.cells.iter().map(|row| row.iter().map(Cell::render).collect()).collect()
    }

    pub fn rows(&self) -> usize {
        self.cells.len()
    }

    pub fn cols(&self) -> usize {
        self.cells[0].len()
    }

    pub fn header_rows(&self) -> usize {
        self.header_rows
    }

    pub fn set_header_rows(&mut self, header_rows: usize) -> Result<(), TableError> {
        if header_rows > self.rows() {
            return Err(TableError::HeaderRowsExceedTable { given: header_rows, rows: self.rows() });
        }
        self.header_rows = header_rows;
        Ok(())
    }

    pub fn get_cell(&self, addr: CellAddress) -> Result<&Cell, TableError> {
        if addr.row == 0 || addr.row > self.rows() {
            return Err(TableError::OutOfRange { axis: Axis::Row, index: addr.row, extent: self.rows() });
        }
        if addr.col == 0 || addr.col > self.cols() {
            return Err(TableError::OutOfRange { axis: Axis::Col, index: addr.col, extent: self.cols() });
        }
        Ok(&self.cells[addr.row - 1][addr.col - 1])
    }

    /// Finds the absolute row whose first cell is `label`. Exact matches
    /// win; otherwise a normalized (case/whitespace-insensitive) pass
    /// runs. More than one hit in the deciding pass is an error.
    pub fn find_row_by_label(&self, label: &str) -> Result<usize, TableError> {
        let texts: Vec<&str> = self.cells.iter().map(|r| r[0].raw_text.as_str()).collect();
        find_one(&texts, label).map_err(|kind| match kind {
            LookupFailure::NotFound => TableError::NotFound { axis: Axis::Row, query: label.to_string() },
            LookupFailure::Ambiguous(candidates) => {
                TableError::Ambiguous { axis: Axis::Row, query: label.to_string(), candidates }
            }
        })
    }

    /// Finds the absolute column whose header cell is `header`, searching
    /// the configured header rows (the first row when none are marked).
    pub fn find_col_by_header(&self, header: &str) -> Result<usize, TableError> {
        let search_rows = self.header_rows.max(1).min(self.rows());
        let mut exact: Vec<usize> = Vec::new();
        let mut normalized: Vec<usize> = Vec::new();
        for col in 0..self.cols() {
            let mut col_exact = false;
            let mut col_norm = false;
            for row in 0..search_rows {
                let text = self.cells[row][col].raw_text.as_str();
                if text == header {
                    col_exact = true;
                }
                if normalize_lookup(text) == normalize_lookup(header) {
                    col_norm = true;
                }
            }
            if col_exact {
                exact.push(col + 1);
            }
            if col_norm {
                normalized.push(col + 1);
            }
        }
        pick_unique(exact, normalized).map_err(|kind| match kind {
            LookupFailure::NotFound => TableError::NotFound { axis: Axis::Col, query: header.to_string() },
            LookupFailure::Ambiguous(candidates) => {
                TableError::Ambiguous { axis: Axis::Col, query: header.to_string(), candidates }
            }
        })
    }
}

enum LookupFailure {
    NotFound,
    Ambiguous(Vec<usize>),
}

fn find_one(texts: &[&str], query: &str) -> Result<usize, LookupFailure> {
    let exact: Vec<usize> = texts
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == query)
        .map(|(i, _)| i + 1)
        .collect();
    let normalized: Vec<usize> = texts
        .iter()
        .enumerate()
        .filter(|(_, t)| normalize_lookup(t) == normalize_lookup(query))
        .map(|(i, _)| i + 1)
        .collect();
    pick_unique(exact, normalized)
}

fn pick_unique(exact: Vec<usize>, normalized: Vec<usize>) -> Result<usize, LookupFailure> {
    match exact.len() {
        1 => return Ok(exact[0]),
        n if n > 1 => return Err(LookupFailure::Ambiguous(exact)),
        _ => {}
    }
    match normalized.len() {
        1 => Ok(normalized[0]),
        0 => Err(LookupFailure::NotFound),
        _ => Err(LookupFailure::Ambiguous(normalized)),
    }
}

fn normalize_lookup(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Normalizes a unit string for comparison: trimmed, inner whitespace
/// collapsed, lowercased. `%` stays `%`.
pub fn normalize_unit(s: &str) -> String {
    normalize_lookup(s)
}

static NUMERIC: LazyLock<Regex> = LazyLock::new(|| {
    // Digits with optional strict thousands grouping and decimal part.
    // A `%` may attach directly; any other unit token needs whitespace
    // before it, so `1e5` or `50°C` stay non-numeric text.
    Regex::new(
        r"^([+-]?)((?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?)(?:\s*(%)|\s+([A-Za-zµ°Ω][A-Za-z0-9µ°Ω%/·^*-]*))?$",
    )
    .expect("numeric pattern compiles")
});

/// Extracts an exact decimal (and optional unit) from cell-style text.
///
/// Handles a leading `[BOLD] ` marker, thousands separators (`1,234`),
/// accountant negatives (`(1,234)` is -1234), a `%` suffix, and a single
/// trailing unit token such as `mg/g`. Printed precision is preserved.
/// Returns `None` when the text is not wholly numeric.
pub fn parse_quantity(text: &str) -> Option<Quantity> {
    let mut s = text.trim();
    if let Some(rest) = s.strip_prefix(EMPHASIS_MARKER) {
        s = rest.trim_start();
    }
    let mut paren_negative = false;
    if s.starts_with('(') && s.ends_with(')') {
        paren_negative = true;
        s = s[1..s.len() - 1].trim();
    }
    let caps = NUMERIC.captures(s)?;
    let digits = caps[2].replace(',', "");
    let mut value = Decimal::from_str(&digits).ok()?;
    if &caps[1] == "-" {
        value = -value;
    }
    if paren_negative {
        value = -value;
    }
    let unit = caps
        .get(3)
        .or_else(|| caps.get(4))
        .map(|m| normalize_unit(m.as_str()));
    Some(Quantity { value, unit })
}

/// [`parse_quantity`] over an already-built cell.
pub fn parse_numeric(cell: &Cell) -> Option<Quantity> {
    cell.quantity()
}
