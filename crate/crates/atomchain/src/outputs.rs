//! Parsers for the tagged texts the model emits at each stage.
//!
//! The formats are fixed: plans arrive as `[Plan N Start] … [Plan N End]`
//! blocks, grounding/extraction/conclusion content inside angle-bracket
//! tags, and step outcomes as `<flag>…</flag>` whose value set tolerates
//! the `Flase` typo that the recap prompt itself carries. Everything here
//! is total over arbitrary input: bad text yields errors, never panics.

use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use crate::chain::{ExtractedFact, Flag, Subplan};
use crate::table::{parse_quantity, CellAddress, Table};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OutputError {
    #[error("no [Plan N Start] … [Plan N End] blocks found")]
    NoPlansFound,
    #[error("plan indices {found:?} are not contiguous from 1 in order")]
    NonContiguousPlanIndices { found: Vec<usize> },
    #[error("[Plan {index} Start] has no matching end marker")]
    UnterminatedPlan { index: usize },
    #[error("missing <{tag}> opening tag")]
    MissingOpenTag { tag: String },
    #[error("<{tag}> block is never closed")]
    MissingCloseTag { tag: String },
    #[error("response has no {header:?} section")]
    MissingSection { header: String },
}

/// Parses the planning stage output into ordered subplans.
///
/// Blocks must appear in document order with indices 1, 2, 3, … and
/// every start marker needs its end marker. Text outside the markers is
/// ignored; the block texts are trimmed.
pub fn parse_plans(text: &str) -> Result<Vec<Subplan>, OutputError> {
    static START: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r"\[Plan (\d+) Start\]").expect("plan pattern compiles"));

    let mut subplans = Vec::new();
    let mut found_indices = Vec::new();
    for caps in START.captures_iter(text) {
        let index: usize = caps[1]
            .parse()
            .map_err(|_| OutputError::NonContiguousPlanIndices { found: found_indices.clone() })?;
        found_indices.push(index);
        let start = caps.get(0).unwrap().end();
        let end_marker = format!("[Plan {index} End]");
        let Some(offset) = text[start..].find(&end_marker) else {
            return Err(OutputError::UnterminatedPlan { index });
        };
        subplans.push(Subplan {
            index,
            text: text[start..start + offset].trim().to_string(),
        });
    }
    if subplans.is_empty() {
        return Err(OutputError::NoPlansFound);
    }
    let contiguous = found_indices.iter().enumerate().all(|(i, &idx)| idx == i + 1);
    if !contiguous {
        return Err(OutputError::NonContiguousPlanIndices { found: found_indices });
    }
    Ok(subplans)
}

/// Inner text and byte span of a `<tag>…</tag>` block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedBlock {
    pub inner: String,
    /// Byte range of the whole block including both tags.
    pub span: (usize, usize),
}

/// Extracts the first `<tag>…</tag>` block, balancing nested same-name
/// tags.
pub fn parse_tagged(text: &str, tag: &str) -> Result<TaggedBlock, OutputError> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text
        .find(&open)
        .ok_or_else(|| OutputError::MissingOpenTag { tag: tag.to_string() })?;
    let mut pos = start + open.len();
    let mut depth = 1usize;
    while depth > 0 {
        let rest = &text[pos..];
        let next_open = rest.find(&open);
        let next_close = rest.find(&close);
        match (next_open, next_close) {
            (_, None) => return Err(OutputError::MissingCloseTag { tag: tag.to_string() }),
            (Some(o), Some(c)) if o < c => {
                depth += 1;
                pos += o + open.len();
            }
            (_, Some(c)) => {
                depth -= 1;
                pos += c + close.len();
            }
        }
    }
    let inner_end = pos - close.len();
    Ok(TaggedBlock {
        inner: text[start + open.len()..inner_end].to_string(),
        span: (start, pos),
    })
}

/// One recognized flag occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedFlag {
    pub value: Flag,
    /// Byte range of the whole `<flag>…</flag>` block.
    pub span: (usize, usize),
}

/// Non-fatal oddities from a flag scan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FlagIssue {
    /// More than one recognizable flag; the last one won.
    MultipleFlags { count: usize },
    /// A flag block whose value is outside the known set.
    UnknownFlagValue { text: String },
}

/// Result of scanning a text for `<flag>` blocks.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FlagScan {
    pub flag: Option<ParsedFlag>,
    pub issues: Vec<FlagIssue>,
}

/// Scans for `<flag>…</flag>` blocks. Values are matched
/// case-insensitively against `True`, `False`, the printed typo `Flase`,
/// and `Not enough information`; when several valid flags appear the last
/// one wins and the scan says so.
pub fn parse_flag(text: &str) -> FlagScan {
    static FLAG: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r"(?s)<flag>(.*?)</flag>").expect("flag pattern compiles"));

    let mut scan = FlagScan::default();
    let mut valid = 0usize;
    for caps in FLAG.captures_iter(text) {
        let raw = caps[1].trim();
        let value = match raw.to_lowercase().as_str() {
            "true" => Some(Flag::True),
            "false" | "flase" => Some(Flag::False),
            "not enough information" => Some(Flag::NotEnoughInfo),
            _ => None,
        };
        match value {
            Some(value) => {
                valid += 1;
                let m = caps.get(0).unwrap();
                scan.flag = Some(ParsedFlag { value, span: (m.start(), m.end()) });
            }
            None => scan
                .issues
                .push(FlagIssue::UnknownFlagValue { text: raw.to_string() }),
        }
    }
    if valid > 1 {
        scan.issues.push(FlagIssue::MultipleFlags { count: valid });
    }
    scan
}

/// Splits prose into sentences. A boundary is `.`, `!` or `?` followed by
/// whitespace and an uppercase letter (or end of text), which keeps
/// decimal points like `1.3` inside one sentence.
fn split_sentences(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut sentences = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c == '.' || c == '!' || c == '?' {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j] as char).is_whitespace() {
                j += 1;
            }
            let at_end = j >= bytes.len();
            let next_upper = text[j..].chars().next().is_some_and(|ch| ch.is_uppercase());
            if (at_end || next_upper) && j > i + 1 || at_end {
                let sentence = text[start..=i].trim();
                if !sentence.is_empty() {
                    sentences.push(sentence);
                }
                start = j;
                i = j;
                continue;
            }
        }
        i += 1;
    }
    let tail = text[start.min(text.len())..].trim();
    if !tail.is_empty() {
        sentences.push(tail);
    }
    sentences
}

/// A quoted span inside a sentence: the text between straight single or
/// double quotes.
fn quoted_spans(sentence: &str) -> Vec<(usize, usize)> {
    let bytes = sentence.as_bytes();
    let mut spans = Vec::new();
    let mut i = 0usize;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c == '\'' || c == '"' {
            // An opening quote follows start-of-text, whitespace, or an
            // opening bracket; apostrophes inside words don't open.
            let opens = i == 0
                || matches!(bytes[i - 1] as char, ch if ch.is_whitespace() || ch == '(' || ch == '[');
            if opens {
                if let Some(rel) = sentence[i + 1..].find(c) {
                    let close = i + 1 + rel;
                    spans.push((i + 1, close));
                    i = close + 1;
                    continue;
                }
            }
        }
        i += 1;
    }
    spans
}

static NUMBER_TOKEN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"-?\d[\d,]*(?:\.\d+)?").expect("number token pattern compiles")
});

/// Standalone numbers in a sentence: not glued to letters (so `8th` and
/// `v1.3` don't count), and not inside any of the given spans.
fn standalone_numbers(sentence: &str, exclude: &[(usize, usize)]) -> Vec<(usize, String)> {
    let bytes = sentence.as_bytes();
    let mut numbers = Vec::new();
    for m in NUMBER_TOKEN.find_iter(sentence) {
        let before_ok = m.start() == 0
            || !(bytes[m.start() - 1] as char).is_alphanumeric();
        let after_ok = m.end() >= bytes.len()
            || !(bytes[m.end()] as char).is_alphabetic();
        let excluded = exclude
            .iter()
            .any(|&(s, e)| m.start() >= s && m.end() <= e);
        if before_ok && after_ok && !excluded {
            numbers.push((m.start(), m.as_str().to_string()));
        }
    }
    numbers
}

/// Recovers cell facts from grounding/extraction prose.
///
/// Sentence by sentence: quoted mentions are matched against the table as
/// (row label, column header) in both orders, the first resolvable pair
/// becomes the fact's address, and the first standalone number outside
/// quoted label spans becomes its value. Quoted spans that are themselves
/// numbers count as values, not labels. Sentences whose mentions don't
/// resolve still yield description-only facts; sentences with neither
/// quotes nor numbers are skipped.
pub fn extract_cell_facts(text: &str, table: &Table) -> Vec<ExtractedFact> {
    let mut facts = Vec::new();
    for sentence in split_sentences(text) {
        let spans = quoted_spans(sentence);
        let mut labels: Vec<(usize, usize)> = Vec::new();
        let mut quoted_numbers: Vec<(usize, String)> = Vec::new();
        for &(s, e) in &spans {
            let inner = &sentence[s..e];
            match parse_quantity(inner) {
                Some(_) => quoted_numbers.push((s, inner.to_string())),
                None => labels.push((s, e)),
            }
        }

        let mut address = None;
        'pairs: for (i, &(s1, e1)) in labels.iter().enumerate() {
            for &(s2, e2) in labels.iter().skip(i + 1) {
                let a = &sentence[s1..e1];
                let b = &sentence[s2..e2];
                for (row_label, col_header) in [(a, b), (b, a)] {
                    if let (Ok(row), Ok(col)) = (
                        table.find_row_by_label(row_label),
                        table.find_col_by_header(col_header),
                    ) {
                        address = Some(CellAddress::new(row, col));
                        break 'pairs;
                    }
                }
            }
        }

        let mut numbers = standalone_numbers(sentence, &labels);
        numbers.extend(quoted_numbers);
        numbers.sort_by_key(|&(pos, _)| pos);
        let value = numbers.first().and_then(|(_, token)| parse_quantity(token));

        if address.is_none() && value.is_none() && labels.is_empty() {
            continue;
        }
        facts.push(ExtractedFact {
            address,
            description: sentence.to_string(),
            value,
        });
    }
    facts
}

/// Claims pulled from the bulleted `- [aspect]: [claim]` list of a
/// positive-claims response.
pub fn parse_claim_bullets(text: &str) -> Vec<String> {
    let mut claims = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        let Some(body) = line.strip_prefix("- ").or_else(|| line.strip_prefix("* ")) else {
            continue;
        };
        let body = body.trim();
        // Strip the aspect prefix when present: "[aspect]: claim" or
        // "**aspect**: claim" or "aspect: claim".
        let claim = if let Some(rest) = body.strip_prefix('[') {
            match rest.split_once("]:") {
                Some((_, c)) => c,
                None => body,
            }
        } else if let Some((head, rest)) = body.split_once(": ") {
            // Keep the whole bullet when the colon is part of the claim
            // itself (a long head is prose, not an aspect tag).
            if head.len() <= 60 && !head.contains('.') {
                rest
            } else {
                body
            }
        } else {
            body
        };
        let claim = claim.trim().trim_matches('*').trim();
        if claim.chars().any(char::is_alphanumeric) {
            claims.push(claim.to_string());
        }
    }
    claims
}

/// A thought/claim response from the claim-editing prompts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Revision {
    pub thought: String,
    pub claim: String,
}

/// Parses a `### Thought` / `### Claim` response. The claim section is
/// required and non-empty; the thought may be absent.
pub fn parse_revision(text: &str) -> Result<Revision, OutputError> {
    let thought = section_body(text, "### Thought").unwrap_or_default();
    let claim = section_body(text, "### Claim")
        .filter(|c| !c.is_empty())
        .ok_or_else(|| OutputError::MissingSection { header: "### Claim".to_string() })?;
    Ok(Revision { thought, claim })
}

/// The trimmed text under `header` up to the next `###` heading.
fn section_body(text: &str, header: &str) -> Option<String> {
    let mut lines = text.lines();
    let mut body: Option<Vec<&str>> = None;
    while let Some(line) = lines.next() {
        if line.trim() == header {
            let mut collected = Vec::new();
            for line in lines.by_ref() {
                if line.trim_start().starts_with("###") {
                    break;
                }
                collected.push(line);
            }
            body = Some(collected);
            break;
        }
    }
    body.map(|lines| lines.join("\n").trim().to_string())
}
