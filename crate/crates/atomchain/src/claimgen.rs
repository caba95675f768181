//! Claim production: positive claims from a table, negatives by minimal
//! semantic flip or single-number data manipulation, out-of-scope
//! rewriting, and pair validation with an adjudication queue for
//! anything the validators cannot settle.

use std::ops::Range;
use std::sync::OnceLock;

use regex::Regex;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::Verdict;
use crate::client::{ClientError, GenerationRequest, LlmClient, Message};
use crate::oracle::{eval, parse_check, print_check, CheckExpr, OracleValue};
use crate::orchestrator::{OrchestratorError, RunSettings, Verifier};
use crate::outputs::{parse_claim_bullets, parse_revision};
use crate::prompt::{Placeholder, RenderContext, RenderedPrompt, TemplateError, TemplateId, TemplateSet};
use crate::table::Table;

/// Schema tag stamped on serialized adjudication-queue entries.
pub const ADJUDICATION_SCHEMA: &str = "atomchain.adjudication.v1";

/// Vague quantifiers that disqualify a generated positive claim.
pub const BANNED_VAGUE_WORDS: [&str; 5] =
    ["significantly", "substantially", "consistently", "poorly", "similarly"];

/// The first banned vague word appearing in `text` as a whole word,
/// case-insensitively.
pub fn banned_vague_word(text: &str) -> Option<&'static str> {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    let re = PATTERN.get_or_init(|| {
        Regex::new(r"(?i)\b(significantly|substantially|consistently|poorly|similarly)\b")
            .expect("static pattern compiles")
    });
    let found = re.find(text)?.as_str().to_ascii_lowercase();
    BANNED_VAGUE_WORDS.iter().copied().find(|word| *word == found)
}

/// Levenshtein distance over whitespace tokens.
pub fn token_edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<&str> = a.split_whitespace().collect();
    let b: Vec<&str> = b.split_whitespace().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, ta) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, tb) in b.iter().enumerate() {
            let substitute = prev[j] + usize::from(ta != tb);
            curr[j + 1] = substitute.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// How a pair's negative claim was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NegativeMethod {
    SemanticFlip,
    DataManipulation,
}

/// Who or what confirmed the pair's labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Validation {
    Oracle,
    Multipath,
    Human,
    Unvalidated,
}

/// A supported/refuted claim pair over one table. Checks are stored in
/// their printed DSL form; a claim's check asserts the claim itself, so
/// the positive check holds on the table and the negative one does not.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimPair {
    pub table_ref: String,
    pub positive: String,
    pub negative: String,
    pub negative_method: NegativeMethod,
    pub validation: Validation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_check: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_check: Option<String>,
}

/// A pair the validators could not confirm, queued for a human verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjudicationEntry {
    pub schema: String,
    pub pair: ClaimPair,
    pub problems: Vec<String>,
}

impl AdjudicationEntry {
    pub fn new(pair: ClaimPair, problems: Vec<String>) -> AdjudicationEntry {
        AdjudicationEntry { schema: ADJUDICATION_SCHEMA.to_string(), pair, problems }
    }
}

/// Result of validating a pair: confirmed, or queued with reasons.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PairOutcome {
    Validated(ClaimPair),
    NeedsAdjudication { pair: ClaimPair, problems: Vec<String> },
}

/// A data-manipulation negative: the altered text, the re-targeted check
/// when the oracle confirmed the flip, and which validator confirmed it.
#[derive(Debug, Clone, PartialEq)]
pub struct Manipulated {
    pub text: String,
    pub check: Option<CheckExpr>,
    pub validation: Validation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorySettings {
    /// Regenerations allowed after a rejected response, per operation.
    pub max_regenerations: u32,
    /// Positive generation keeps asking until this many claims survive
    /// the vague-word filter.
    pub min_positive_claims: usize,
    /// A flip may change at most this fraction of the claim's tokens.
    pub flip_max_fraction: f64,
    /// Paths used when a claim must be cross-validated by voting.
    pub multipath_paths: usize,
}

impl Default for FactorySettings {
    fn default() -> Self {
        FactorySettings {
            max_regenerations: 3,
            min_positive_claims: 5,
            flip_max_fraction: 0.25,
            multipath_paths: 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum FactoryError {
    #[error("generation budget exhausted after {attempts} attempts in {operation}")]
    BudgetExceeded { operation: &'static str, attempts: u32 },
    #[error("claim has no quantitative element to alter")]
    NoQuantitativeElement,
    #[error("could not produce a refuted variant: {reason}")]
    CouldNotFalsify { reason: String },
    #[error("claim is empty")]
    EmptyClaim,
    #[error("backend failure in {operation}: {source}")]
    Backend {
        operation: &'static str,
        #[source]
        source: ClientError,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
}

/// A claim factory bound to one client and template bundle.
pub struct ClaimFactory<'a> {
    client: &'a LlmClient,
    templates: &'a TemplateSet,
    run: RunSettings,
    settings: FactorySettings,
}

impl<'a> ClaimFactory<'a> {
    pub fn new(
        client: &'a LlmClient,
        templates: &'a TemplateSet,
        run: RunSettings,
        settings: FactorySettings,
    ) -> Self {
        ClaimFactory { client, templates, run, settings }
    }

    fn verifier(&self) -> Verifier<'_> {
        Verifier::new(self.client, self.templates, self.run.clone())
    }

    fn generate(
        &self,
        operation: &'static str,
        rendered: &RenderedPrompt,
        attempt: u32,
    ) -> Result<String, FactoryError> {
        let request = GenerationRequest {
            model: self.run.model.clone(),
            messages: vec![
                Message::system(rendered.system.clone()),
                Message::user(rendered.user.clone()),
            ],
            temperature: self.run.temperature,
            top_p: self.run.nucleus_p,
            max_tokens: self.run.max_tokens,
            seed: self.run.seed.map(|s| s.wrapping_add(u64::from(attempt - 1))),
            top_k: None,
        };
        self.client
            .generate(&request)
            .map(|outcome| outcome.text)
            .map_err(|source| FactoryError::Backend { operation, source })
    }

    fn table_context(table: &Table) -> RenderContext {
        RenderContext::new()
            .set(Placeholder::Caption, table.caption.clone())
            .set(Placeholder::Table, table.render())
    }

    /// Asks for supported claims about the table, dropping any bullet
    /// that uses a banned vague word, until enough survive the filter.
    pub fn generate_positive(&self, table: &Table) -> Result<Vec<String>, FactoryError> {
        let rendered =
            self.templates.render(TemplateId::PositiveClaims, &Self::table_context(table))?;
        let mut attempts = 0;
        loop {
            attempts += 1;
            let text = self.generate("generate_positive", &rendered, attempts)?;
            let mut accepted: Vec<String> = Vec::new();
            for claim in parse_claim_bullets(&text) {
                if banned_vague_word(&claim).is_none() && !accepted.contains(&claim) {
                    accepted.push(claim);
                }
            }
            if accepted.len() >= self.settings.min_positive_claims {
                return Ok(accepted);
            }
            if attempts > self.settings.max_regenerations {
                return Err(FactoryError::BudgetExceeded {
                    operation: "generate_positive",
                    attempts,
                });
            }
        }
    }

    /// Minimally edits a supported claim into a refuted one. The edit
    /// must change at least one token and at most the configured
    /// fraction of the claim's tokens.
    pub fn flip_claim(&self, table: &Table, claim: &str) -> Result<String, FactoryError> {
        if claim.trim().is_empty() {
            return Err(FactoryError::EmptyClaim);
        }
        let rendered = self.templates.render(
            TemplateId::NegativeFlip,
            &Self::table_context(table).set(Placeholder::Claim, claim),
        )?;
        let token_budget =
            self.settings.flip_max_fraction * claim.split_whitespace().count() as f64;
        let mut attempts = 0;
        loop {
            attempts += 1;
            let text = self.generate("flip_claim", &rendered, attempts)?;
            if let Ok(revision) = parse_revision(&text) {
                let distance = token_edit_distance(claim, &revision.claim);
                if distance >= 1 && distance as f64 <= token_budget {
                    return Ok(revision.claim);
                }
            }
            if attempts > self.settings.max_regenerations {
                return Err(FactoryError::BudgetExceeded { operation: "flip_claim", attempts });
            }
        }
    }

    /// Alters exactly one number in the claim so the claim flips to
    /// refuted, leaving every other token untouched. With a check
    /// attached the oracle confirms the flip; otherwise a multipath run
    /// must agree on REFUTE.
    pub fn manipulate_data(
        &self,
        table: &Table,
        claim: &str,
        check: Option<&CheckExpr>,
    ) -> Result<Manipulated, FactoryError> {
        let numbers = find_numbers(claim);
        if numbers.is_empty() {
            return Err(FactoryError::NoQuantitativeElement);
        }
        match check {
            Some(check) => {
                match eval(check, table) {
                    Ok(verdict) if verdict.value == OracleValue::Bool(true) => {}
                    Ok(_) => {
                        return Err(FactoryError::CouldNotFalsify {
                            reason: "the attached check does not hold on the table".to_string(),
                        })
                    }
                    Err(error) => {
                        return Err(FactoryError::CouldNotFalsify {
                            reason: format!("the attached check does not evaluate: {error}"),
                        })
                    }
                }
                for (range, old) in &numbers {
                    for candidate in perturbation_candidates(*old) {
                        let (flipped, replaced) = check.replace_literal(*old, candidate);
                        if replaced == 0 {
                            // This claim number is not a check literal;
                            // altering it cannot flip the oracle verdict.
                            break;
                        }
                        let Ok(verdict) = eval(&flipped, table) else { continue };
                        if verdict.value == OracleValue::Bool(false) {
                            return Ok(Manipulated {
                                text: splice(claim, range, &candidate.to_string()),
                                check: Some(flipped),
                                validation: Validation::Oracle,
                            });
                        }
                    }
                }
                Err(FactoryError::CouldNotFalsify {
                    reason: "no single-number perturbation flips the attached check".to_string(),
                })
            }
            None => {
                let verifier = self.verifier();
                for (range, old) in &numbers {
                    for candidate in perturbation_candidates(*old) {
                        let altered = splice(claim, range, &candidate.to_string());
                        let outcome = verifier.multipath_verify(
                            table,
                            "manipulation-probe",
                            &altered,
                            self.settings.multipath_paths,
                        )?;
                        if outcome.agreed_label == Some(Verdict::Refute) {
                            return Ok(Manipulated {
                                text: altered,
                                check: None,
                                validation: Validation::Multipath,
                            });
                        }
                    }
                }
                Err(FactoryError::CouldNotFalsify {
                    reason: "no single-number perturbation yields an agreed REFUTE".to_string(),
                })
            }
        }
    }

    /// Rewrites a claim that leans on outside knowledge into one
    /// checkable from the table alone; the rewrite must still verify as
    /// supported under a multipath vote.
    pub fn rewrite_oos(&self, table: &Table, claim: &str) -> Result<String, FactoryError> {
        if claim.trim().is_empty() {
            return Err(FactoryError::EmptyClaim);
        }
        let rendered = self.templates.render(
            TemplateId::OosRewrite,
            &Self::table_context(table).set(Placeholder::Claim, claim),
        )?;
        let verifier = self.verifier();
        let mut attempts = 0;
        loop {
            attempts += 1;
            let text = self.generate("rewrite_oos", &rendered, attempts)?;
            if let Ok(revision) = parse_revision(&text) {
                if !revision.claim.trim().is_empty() {
                    let outcome = verifier.multipath_verify(
                        table,
                        "oos-probe",
                        &revision.claim,
                        self.settings.multipath_paths,
                    )?;
                    if outcome.agreed_label == Some(Verdict::Support) {
                        return Ok(revision.claim);
                    }
                }
            }
            if attempts > self.settings.max_regenerations {
                return Err(FactoryError::BudgetExceeded { operation: "rewrite_oos", attempts });
            }
        }
    }

    /// Confirms a pair's labels: checks go to the oracle, everything
    /// else to a multipath vote. Any failure routes the pair to the
    /// adjudication queue instead of promoting it.
    pub fn validate_pair(
        &self,
        table: &Table,
        pair: ClaimPair,
    ) -> Result<PairOutcome, FactoryError> {
        let mut problems: Vec<String> = Vec::new();
        let positive_check = parse_stored_check(&pair.positive_check, "positive", &mut problems);
        let negative_check = parse_stored_check(&pair.negative_check, "negative", &mut problems);

        let mut used_multipath = false;
        if problems.is_empty() {
            match &positive_check {
                Some(check) => match eval(check, table) {
                    Ok(verdict) if verdict.value == OracleValue::Bool(true) => {}
                    Ok(_) => problems
                        .push("positive check does not hold on the table".to_string()),
                    Err(error) => {
                        problems.push(format!("positive check failed to evaluate: {error}"))
                    }
                },
                None => {
                    used_multipath = true;
                    let outcome = self.verifier().multipath_verify(
                        table,
                        "pair-positive",
                        &pair.positive,
                        self.settings.multipath_paths,
                    )?;
                    match outcome.agreed_label {
                        Some(Verdict::Support) => {}
                        Some(other) => problems
                            .push(format!("positive claim verified {other} instead of SUPPORT")),
                        None => problems
                            .push("no majority verdict for the positive claim".to_string()),
                    }
                }
            }
            match &negative_check {
                Some(check) => match eval(check, table) {
                    Ok(verdict) if verdict.value == OracleValue::Bool(false) => {}
                    Ok(_) => problems
                        .push("negative check still holds on the table".to_string()),
                    Err(error) => {
                        problems.push(format!("negative check failed to evaluate: {error}"))
                    }
                },
                None => {
                    used_multipath = true;
                    let outcome = self.verifier().multipath_verify(
                        table,
                        "pair-negative",
                        &pair.negative,
                        self.settings.multipath_paths,
                    )?;
                    match outcome.agreed_label {
                        Some(Verdict::Refute) => {}
                        Some(other) => problems
                            .push(format!("negative claim verified {other} instead of REFUTE")),
                        None => problems
                            .push("no majority verdict for the negative claim".to_string()),
                    }
                }
            }
        }

        if problems.is_empty() {
            let validation =
                if used_multipath { Validation::Multipath } else { Validation::Oracle };
            Ok(PairOutcome::Validated(ClaimPair { validation, ..pair }))
        } else {
            Ok(PairOutcome::NeedsAdjudication {
                pair: ClaimPair { validation: Validation::Unvalidated, ..pair },
                problems,
            })
        }
    }

    /// Generates positives and one negative per positive with the given
    /// method. A positive whose negative cannot be produced is dropped,
    /// keeping positives and negatives balanced per table. Pairs come
    /// back unvalidated; run them through `validate_pair`.
    pub fn generate_pairs(
        &self,
        table: &Table,
        method: NegativeMethod,
    ) -> Result<Vec<ClaimPair>, FactoryError> {
        let positives = self.generate_positive(table)?;
        let mut pairs = Vec::new();
        for positive in positives {
            let negative = match method {
                NegativeMethod::SemanticFlip => {
                    self.flip_claim(table, &positive).map(|text| (text, None))
                }
                NegativeMethod::DataManipulation => self
                    .manipulate_data(table, &positive, None)
                    .map(|made| (made.text, made.check)),
            };
            match negative {
                Ok((text, check)) => pairs.push(ClaimPair {
                    table_ref: table.caption.clone(),
                    positive,
                    negative: text,
                    negative_method: method,
                    validation: Validation::Unvalidated,
                    positive_check: None,
                    negative_check: check.map(|c| print_check(&c)),
                }),
                Err(
                    FactoryError::BudgetExceeded { .. }
                    | FactoryError::NoQuantitativeElement
                    | FactoryError::CouldNotFalsify { .. },
                ) => continue,
                Err(other) => return Err(other),
            }
        }
        Ok(pairs)
    }
}

fn parse_stored_check(
    stored: &Option<String>,
    side: &str,
    problems: &mut Vec<String>,
) -> Option<CheckExpr> {
    let text = stored.as_deref()?;
    match parse_check(text) {
        Ok(check) => Some(check),
        Err(error) => {
            problems.push(format!("{side} check does not parse: {error}"));
            None
        }
    }
}

/// Byte ranges and values of the numbers quoted in a claim.
fn find_numbers(claim: &str) -> Vec<(Range<usize>, Decimal)> {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    let re = PATTERN
        .get_or_init(|| Regex::new(r"\d+(?:\.\d+)?").expect("static pattern compiles"));
    re.find_iter(claim)
        .filter_map(|m| m.as_str().parse::<Decimal>().ok().map(|value| (m.range(), value)))
        .collect()
}

fn splice(claim: &str, range: &Range<usize>, replacement: &str) -> String {
    format!("{}{}{}", &claim[..range.start], replacement, &claim[range.end..])
}

/// Format-preserving perturbations of one number, nearest first: one or
/// two steps in the last printed digit, then in the leading digit. All
/// candidates keep the original's decimal places and stay positive.
fn perturbation_candidates(value: Decimal) -> Vec<Decimal> {
    let ulp = Decimal::new(1, value.scale());
    let int_digits = value.abs().trunc().normalize().to_string().len() as u32;
    let mut magnitude = Decimal::ONE;
    for _ in 1..int_digits {
        magnitude *= Decimal::TEN;
    }
    let mut out: Vec<Decimal> = Vec::new();
    let mut push = |candidate: Decimal| {
        if candidate > Decimal::ZERO && candidate != value && !out.contains(&candidate) {
            out.push(candidate);
        }
    };
    for delta in [ulp, ulp + ulp, magnitude, magnitude + magnitude] {
        push(value + delta);
        push(value - delta);
    }
    out
}
