//! Chain-quality metrics: per-step accuracy, leave-one-out information
//! redundancy, adjacent-step alignment, human granularity and
//! interpretability score ingestion, benchmark label accuracy, and the
//! failure-mode histogram.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{StepRecord, Verdict};
use crate::client::{ClientError, GenerationRequest, LlmClient, Message};
use crate::oracle::{eval, CheckExpr, OracleError};
use crate::orchestrator::{DomainTally, NeiPolicy, RunSettings};
use crate::table::{CellAddress, Table};

/// Verdict of one judged reasoning step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StepVerdict {
    Correct,
    Incorrect,
}

/// Who judged a step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JudgeKind {
    Model(String),
    Human(String),
    Oracle,
}

/// One correctness judgment for one executed step (1-based index).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepJudgment {
    pub step: usize,
    pub verdict: StepVerdict,
    pub judge: JudgeKind,
}

/// The five quality dimensions for one trace. Granularity and
/// interpretability appear only once human scores are ingested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetrics {
    pub accuracy: f64,
    pub redundancy_rate: f64,
    pub alignment_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub granularity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interpretability: Option<f64>,
}

/// Reasoning failure modes tallied in the error analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorTag {
    Snowball,
    ContextualConflict,
    CoarseGrained,
}

impl ErrorTag {
    pub const ALL: [ErrorTag; 3] =
        [ErrorTag::Snowball, ErrorTag::ContextualConflict, ErrorTag::CoarseGrained];
}

/// Failure-mode tags attached to one trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorAnnotation {
    pub trace_id: String,
    pub tags: Vec<ErrorTag>,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no judgment for step {step}")]
    MissingJudgment { step: usize },
    #[error("judgment for step {step} is outside the trace's {steps} step(s)")]
    JudgmentOutOfBounds { step: usize, steps: usize },
    #[error("{column} score {value} for trace {trace} by {annotator} is outside 0..=10")]
    ScoreOutOfRange { trace: String, annotator: String, column: &'static str, value: f64 },
    #[error("malformed score row {row}: {message}")]
    MalformedScore { row: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("record {id} has no gold label")]
    MissingGold { id: String },
    #[error("annotation references unknown trace {trace_id}")]
    UnknownTrace { trace_id: String },
    #[error("judge gave no usable verdict: {reply:?}")]
    UnreadableJudgment { reply: String },
    #[error("judge backend failure: {0}")]
    Backend(#[from] ClientError),
    #[error("oracle evidence unavailable: {0}")]
    Oracle(#[from] OracleError),
}

/// Mean step correctness: (1/N) * count(CORRECT). Ingestion is
/// idempotent: judgments are keyed by step, so re-adding one changes
/// nothing and the latest judgment for a step wins. A zero-step trace is
/// vacuously accurate.
pub fn step_accuracy(steps: usize, judgments: &[StepJudgment]) -> Result<f64, MetricsError> {
    let mut by_step: BTreeMap<usize, StepVerdict> = BTreeMap::new();
    for judgment in judgments {
        if judgment.step == 0 || judgment.step > steps {
            return Err(MetricsError::JudgmentOutOfBounds { step: judgment.step, steps });
        }
        by_step.insert(judgment.step, judgment.verdict);
    }
    if steps == 0 {
        return Ok(1.0);
    }
    for step in 1..=steps {
        if !by_step.contains_key(&step) {
            return Err(MetricsError::MissingJudgment { step });
        }
    }
    let correct = by_step.values().filter(|v| **v == StepVerdict::Correct).count();
    Ok(correct as f64 / steps as f64)
}

/// One removable unit of a step's local context: the plan sentence or an
/// extracted fact. Facts carry the cell address they came from so the
/// oracle judge can compare against a check's evidence set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextElement {
    pub label: String,
    pub text: String,
    pub address: Option<CellAddress>,
}

/// The removable context units of a step: its subplan sentence followed
/// by each extracted fact.
pub fn step_context_elements(step: &StepRecord) -> Vec<ContextElement> {
    let mut elements = vec![ContextElement {
        label: "plan".to_string(),
        text: step.subplan.text.clone(),
        address: None,
    }];
    for (i, fact) in step.extraction.iter().enumerate() {
        elements.push(ContextElement {
            label: format!("fact{}", i + 1),
            text: fact.description.clone(),
            address: fact.address,
        });
    }
    elements
}

/// Decides whether a step's conclusion survives removing one context
/// element (removal leaving it unchanged makes the element redundant).
pub trait RedundancyJudge {
    fn is_redundant(
        &self,
        step: &StepRecord,
        element: &ContextElement,
    ) -> Result<bool, MetricsError>;
}

impl<F> RedundancyJudge for F
where
    F: Fn(&StepRecord, &ContextElement) -> Result<bool, MetricsError>,
{
    fn is_redundant(
        &self,
        step: &StepRecord,
        element: &ContextElement,
    ) -> Result<bool, MetricsError> {
        self(step, element)
    }
}

/// Leave-one-out redundancy rate for one step: redundant elements over
/// total elements. No elements means nothing to remove: rate 0.
pub fn redundancy_probe(
    step: &StepRecord,
    elements: &[ContextElement],
    judge: &dyn RedundancyJudge,
) -> Result<f64, MetricsError> {
    if elements.is_empty() {
        return Ok(0.0);
    }
    let mut redundant = 0usize;
    for element in elements {
        if judge.is_redundant(step, element)? {
            redundant += 1;
        }
    }
    Ok(redundant as f64 / elements.len() as f64)
}

/// Redundancy over a whole trace: redundant context elements across all
/// steps over total elements (0 when there is nothing to remove).
pub fn trace_redundancy(
    steps: &[StepRecord],
    judge: &dyn RedundancyJudge,
) -> Result<f64, MetricsError> {
    let mut total = 0usize;
    let mut redundant = 0usize;
    for step in steps {
        for element in step_context_elements(step) {
            total += 1;
            if judge.is_redundant(step, &element)? {
                redundant += 1;
            }
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(redundant as f64 / total as f64)
}

/// Decides whether the later step builds on the earlier one without
/// contradicting or dropping its information.
pub trait AlignmentJudge {
    fn aligned(&self, previous: &StepRecord, current: &StepRecord) -> Result<bool, MetricsError>;
}

impl<F> AlignmentJudge for F
where
    F: Fn(&StepRecord, &StepRecord) -> Result<bool, MetricsError>,
{
    fn aligned(&self, previous: &StepRecord, current: &StepRecord) -> Result<bool, MetricsError> {
        self(previous, current)
    }
}

/// Fraction of adjacent step pairs the judge deems aligned. Fewer than
/// two steps means no pairs: vacuously 1.
pub fn alignment_check(
    steps: &[StepRecord],
    judge: &dyn AlignmentJudge,
) -> Result<f64, MetricsError> {
    if steps.len() < 2 {
        return Ok(1.0);
    }
    let mut aligned = 0usize;
    let pairs = steps.len() - 1;
    for window in steps.windows(2) {
        if judge.aligned(&window[0], &window[1])? {
            aligned += 1;
        }
    }
    Ok(aligned as f64 / pairs as f64)
}

/// Exact redundancy semantics for an oracle-checkable step: a fact is
/// essential exactly when its cell is in the check's evidence set, so
/// facts outside that set (and only those) are redundant. Elements
/// without an address (the plan sentence) are never redundant.
pub struct OracleRedundancyJudge {
    evidence: BTreeSet<CellAddress>,
}

impl OracleRedundancyJudge {
    pub fn from_check(check: &CheckExpr, table: &Table) -> Result<Self, MetricsError> {
        let verdict = eval(check, table)?;
        let evidence = verdict.evidence.into_iter().map(|(address, _)| address).collect();
        Ok(OracleRedundancyJudge { evidence })
    }

    pub fn evidence(&self) -> &BTreeSet<CellAddress> {
        &self.evidence
    }
}

impl RedundancyJudge for OracleRedundancyJudge {
    fn is_redundant(
        &self,
        _step: &StepRecord,
        element: &ContextElement,
    ) -> Result<bool, MetricsError> {
        Ok(match element.address {
            Some(address) => !self.evidence.contains(&address),
            None => false,
        })
    }
}

/// A judge that asks the language model YES/NO questions.
pub struct ModelJudge<'a> {
    client: &'a LlmClient,
    run: RunSettings,
}

impl<'a> ModelJudge<'a> {
    pub fn new(client: &'a LlmClient, run: RunSettings) -> Self {
        ModelJudge { client, run }
    }

    fn ask(&self, system: &str, user: String) -> Result<bool, MetricsError> {
        let request = GenerationRequest {
            model: self.run.model.clone(),
            messages: vec![Message::system(system), Message::user(user)],
            temperature: self.run.temperature,
            top_p: self.run.nucleus_p,
            max_tokens: self.run.max_tokens,
            seed: self.run.seed,
            top_k: None,
        };
        let reply = self.client.generate(&request)?.text;
        parse_yes_no(&reply).ok_or(MetricsError::UnreadableJudgment { reply })
    }
}

/// First standalone YES or NO in the reply, case-insensitive.
fn parse_yes_no(text: &str) -> Option<bool> {
    text.split(|c: char| !c.is_ascii_alphabetic()).find_map(|token| {
        if token.eq_ignore_ascii_case("yes") {
            Some(true)
        } else if token.eq_ignore_ascii_case("no") {
            Some(false)
        } else {
            None
        }
    })
}

impl RedundancyJudge for ModelJudge<'_> {
    fn is_redundant(
        &self,
        step: &StepRecord,
        element: &ContextElement,
    ) -> Result<bool, MetricsError> {
        let system = "You judge information redundancy in table reasoning. Given a reasoning \
                      step and one element of its context, decide whether the step's conclusion \
                      would be unchanged if that element were removed. Reply with exactly YES \
                      when the conclusion is unchanged (the element is redundant) or NO when \
                      the element is needed.";
        let user = format!(
            "### Subplan\n{}\n\n### Reasoning\n{}\n\n### Context Element ({})\n{}\n\n\
             ### Unchanged without it? (YES/NO)",
            step.subplan.text,
            step.reasoning.as_deref().unwrap_or(""),
            element.label,
            element.text,
        );
        self.ask(system, user)
    }
}

impl AlignmentJudge for ModelJudge<'_> {
    fn aligned(&self, previous: &StepRecord, current: &StepRecord) -> Result<bool, MetricsError> {
        let system = "You judge logical alignment between consecutive reasoning steps. Decide \
                      whether the later step correctly builds on the earlier one without \
                      contradicting or dropping its information. Reply with exactly YES when \
                      aligned or NO when misaligned.";
        let user = format!(
            "### Earlier Step\n{}\n{}\n\n### Later Step\n{}\n\n### Aligned? (YES/NO)",
            previous.reasoning.as_deref().unwrap_or(""),
            previous.recap.as_deref().unwrap_or(""),
            current.reasoning.as_deref().unwrap_or(""),
        );
        self.ask(system, user)
    }
}

/// Per-trace means of the human 0-10 scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanScores {
    pub granularity: f64,
    pub interpretability: f64,
    pub annotators: usize,
}

/// Result of ingesting a human-score CSV: per-trace means plus warnings
/// for traces scored by fewer than the expected three annotators.
#[derive(Debug, Clone, PartialEq)]
pub struct HumanScoreIngest {
    pub by_trace: BTreeMap<String, HumanScores>,
    pub warnings: Vec<String>,
}

pub const EXPECTED_ANNOTATORS: usize = 3;

/// Reads `trace_id,annotator_id,granularity,interpretability` rows and
/// averages each trace's scores over its annotators.
pub fn ingest_human_scores(reader: impl Read) -> Result<HumanScoreIngest, MetricsError> {
    let mut csv_reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut sums: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for (index, row) in csv_reader.records().enumerate() {
        let row = row?;
        let field = |i: usize| -> Result<&str, MetricsError> {
            row.get(i).ok_or_else(|| MetricsError::MalformedScore {
                row: index + 2,
                message: format!("expected 4 columns, found {}", row.len()),
            })
        };
        let trace = field(0)?.to_string();
        let annotator = field(1)?.to_string();
        let score = |i: usize, column: &'static str| -> Result<f64, MetricsError> {
            let raw = field(i)?;
            let value: f64 = raw.parse().map_err(|_| MetricsError::MalformedScore {
                row: index + 2,
                message: format!("{column} score {raw:?} is not a number"),
            })?;
            if !(0.0..=10.0).contains(&value) {
                return Err(MetricsError::ScoreOutOfRange {
                    trace: trace.clone(),
                    annotator: annotator.clone(),
                    column,
                    value,
                });
            }
            Ok(value)
        };
        let granularity = score(2, "granularity")?;
        let interpretability = score(3, "interpretability")?;
        let entry = sums.entry(trace).or_insert((0.0, 0.0, 0));
        entry.0 += granularity;
        entry.1 += interpretability;
        entry.2 += 1;
    }
    let mut warnings = Vec::new();
    let by_trace = sums
        .into_iter()
        .map(|(trace, (granularity, interpretability, annotators))| {
            if annotators < EXPECTED_ANNOTATORS {
                warnings.push(format!(
                    "trace {trace} scored by {annotators} annotator(s), expected {EXPECTED_ANNOTATORS}"
                ));
            }
            let scores = HumanScores {
                granularity: granularity / annotators as f64,
                interpretability: interpretability / annotators as f64,
                annotators,
            };
            (trace, scores)
        })
        .collect();
    Ok(HumanScoreIngest { by_trace, warnings })
}

/// One labeled prediction for benchmark accuracy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRow {
    pub id: String,
    pub domain: String,
    pub label: Verdict,
    pub gold: Option<bool>,
}

/// Per-domain and overall accuracy tallies.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub domains: BTreeMap<String, DomainTally>,
    pub overall: DomainTally,
}

impl AccuracyTable {
    /// Renders an aligned text table, one row per domain plus a total.
    pub fn render_text(&self) -> String {
        let mut out = String::from(
            "domain        records  support  refute  nei  scored  correct  accuracy\n",
        );
        let mut row = |name: &str, tally: &DomainTally| {
            let accuracy = tally
                .accuracy()
                .map(|a| format!("{a:.3}"))
                .unwrap_or_else(|| "-".to_string());
            out.push_str(&format!(
                "{name:<13} {records:>7}  {support:>7}  {refute:>6}  {nei:>3}  {scored:>6}  {correct:>7}  {accuracy:>8}\n",
                records = tally.records,
                support = tally.support,
                refute = tally.refute,
                nei = tally.not_enough_info,
                scored = tally.scored,
                correct = tally.correct,
            ));
        };
        for (domain, tally) in &self.domains {
            row(domain, tally);
        }
        row("overall", &self.overall);
        out
    }
}

/// Benchmark accuracy per domain. Every row must carry a gold label;
/// NOT_ENOUGH_INFO predictions score per the policy.
pub fn label_accuracy(rows: &[LabelRow], policy: NeiPolicy) -> Result<AccuracyTable, MetricsError> {
    let mut table = AccuracyTable::default();
    for row in rows {
        let Some(gold) = row.gold else {
            return Err(MetricsError::MissingGold { id: row.id.clone() });
        };
        table.domains.entry(row.domain.clone()).or_default().count(
            row.label,
            Some(gold),
            policy,
        );
        table.overall.count(row.label, Some(gold), policy);
    }
    Ok(table)
}

/// Counts tag instances across annotations; every tag appears in the
/// result, zero when unused. Annotations must reference known traces.
pub fn error_histogram(
    annotations: &[ErrorAnnotation],
    known_traces: &BTreeSet<String>,
) -> Result<BTreeMap<ErrorTag, u64>, MetricsError> {
    let mut histogram: BTreeMap<ErrorTag, u64> =
        ErrorTag::ALL.iter().map(|tag| (*tag, 0)).collect();
    for annotation in annotations {
        if !known_traces.contains(&annotation.trace_id) {
            return Err(MetricsError::UnknownTrace { trace_id: annotation.trace_id.clone() });
        }
        for tag in &annotation.tags {
            *histogram.entry(*tag).or_insert(0) += 1;
        }
    }
    Ok(histogram)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{ExtractedFact, Subplan};
    use crate::client::{ScriptRule, ScriptedBackend};
    use crate::oracle::parse_check;
    use crate::testdata::water_table;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn judgment(step: usize, verdict: StepVerdict) -> StepJudgment {
        StepJudgment { step, verdict, judge: JudgeKind::Oracle }
    }

    fn step(text: &str) -> StepRecord {
        let mut record = StepRecord::new(Subplan { index: 1, text: text.to_string() });
        record.reasoning = Some(format!("reasoning about {text}"));
        record.recap = Some(format!("recap of {text}"));
        record
    }

    #[test]
    fn step_accuracy_matches_hand_computed_values() {
        use StepVerdict::*;
        let three_of_four = vec![
            judgment(1, Correct),
            judgment(2, Correct),
            judgment(3, Incorrect),
            judgment(4, Correct),
        ];
        assert_eq!(step_accuracy(4, &three_of_four).unwrap(), 0.75);

        let all = vec![judgment(1, Correct), judgment(2, Correct)];
        assert_eq!(step_accuracy(2, &all).unwrap(), 1.0);
        assert_eq!(step_accuracy(0, &[]).unwrap(), 1.0);
    }

    #[test]
    fn step_accuracy_ingestion_is_idempotent_and_bounded() {
        use StepVerdict::*;
        let mut judgments = vec![judgment(1, Correct), judgment(2, Incorrect)];
        let base = step_accuracy(2, &judgments).unwrap();
        judgments.push(judgment(1, Correct)); // re-added, no change
        assert_eq!(step_accuracy(2, &judgments).unwrap(), base);
        judgments.push(judgment(2, Correct)); // latest wins
        assert_eq!(step_accuracy(2, &judgments).unwrap(), 1.0);

        assert!(matches!(
            step_accuracy(2, &[judgment(1, Correct)]).unwrap_err(),
            MetricsError::MissingJudgment { step: 2 }
        ));
        assert!(matches!(
            step_accuracy(1, &[judgment(2, Correct)]).unwrap_err(),
            MetricsError::JudgmentOutOfBounds { step: 2, steps: 1 }
        ));
        assert!(matches!(
            step_accuracy(1, &[judgment(0, Correct)]).unwrap_err(),
            MetricsError::JudgmentOutOfBounds { step: 0, steps: 1 }
        ));
    }

    #[test]
    fn step_accuracy_equals_a_brute_force_counter() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..200 {
            let steps = rng.random_range(1..=8usize);
            let verdicts: Vec<StepVerdict> = (0..steps)
                .map(|_| {
                    if rng.random_bool(0.5) {
                        StepVerdict::Correct
                    } else {
                        StepVerdict::Incorrect
                    }
                })
                .collect();
            let judgments: Vec<StepJudgment> =
                verdicts.iter().enumerate().map(|(i, v)| judgment(i + 1, *v)).collect();

            // Independent tally: walk the verdict vector directly.
            let mut correct = 0usize;
            let mut total = 0usize;
            for verdict in &verdicts {
                total += 1;
                if matches!(verdict, StepVerdict::Correct) {
                    correct += 1;
                }
            }
            let expected = correct as f64 / total as f64;
            assert_eq!(step_accuracy(steps, &judgments).unwrap(), expected);
        }
    }

    fn element(label: &str, address: Option<(usize, usize)>) -> ContextElement {
        ContextElement {
            label: label.to_string(),
            text: format!("text of {label}"),
            address: address.map(|(row, col)| CellAddress { row, col }),
        }
    }

    #[test]
    fn redundancy_counts_judge_votes() {
        let step = step("sum the water columns");
        let elements: Vec<ContextElement> =
            (1..=4).map(|i| element(&format!("fact{i}"), None)).collect();
        let judge = |_: &StepRecord, e: &ContextElement| Ok(e.label == "fact2");
        assert_eq!(redundancy_probe(&step, &elements, &judge).unwrap(), 0.25);

        assert_eq!(redundancy_probe(&step, &[], &judge).unwrap(), 0.0);
    }

    #[test]
    fn oracle_judge_marks_exactly_the_facts_outside_the_evidence_set() {
        let table = water_table();
        let check = parse_check("(~= (sum (row 4 2 3)) (cell 4 4))").unwrap();
        let judge = OracleRedundancyJudge::from_check(&check, &table).unwrap();
        assert_eq!(
            judge.evidence().iter().map(|a| (a.row, a.col)).collect::<Vec<_>>(),
            vec![(4, 2), (4, 3), (4, 4)]
        );

        let mut record = step("sum the last row");
        record.extraction = vec![
            ExtractedFact {
                address: Some(CellAddress { row: 4, col: 2 }),
                description: "freezable water 5.3".to_string(),
                value: None,
            },
            ExtractedFact {
                address: Some(CellAddress { row: 4, col: 3 }),
                description: "non-frozen water 7.7".to_string(),
                value: None,
            },
            ExtractedFact {
                address: Some(CellAddress { row: 2, col: 3 }),
                description: "an unrelated XLPE cell".to_string(),
                value: None,
            },
        ];
        let elements = step_context_elements(&record);
        assert_eq!(elements.len(), 4); // plan + 3 facts

        let redundant: Vec<&str> = elements
            .iter()
            .filter(|e| judge.is_redundant(&record, e).unwrap())
            .map(|e| e.label.as_str())
            .collect();
        assert_eq!(redundant, vec!["fact3"]);
        assert_eq!(redundancy_probe(&record, &elements, &judge).unwrap(), 0.25);
    }

    #[test]
    fn trace_redundancy_aggregates_elements_across_steps() {
        // Step one: plan + 1 fact; step two: plan + 3 facts. The judge
        // marks plan elements redundant: 2 of 6 elements.
        let mut first = step("first");
        first.extraction = vec![ExtractedFact {
            address: None,
            description: "fact".to_string(),
            value: None,
        }];
        let mut second = step("second");
        second.extraction = (0..3)
            .map(|i| ExtractedFact {
                address: None,
                description: format!("fact {i}"),
                value: None,
            })
            .collect();
        let judge = |_: &StepRecord, e: &ContextElement| Ok(e.label == "plan");
        let rate = trace_redundancy(&[first, second], &judge).unwrap();
        assert_eq!(rate, 2.0 / 6.0);

        assert_eq!(trace_redundancy(&[], &judge).unwrap(), 0.0);
    }

    #[test]
    fn alignment_is_vacuous_without_pairs_and_counts_failures() {
        let judge_all = |_: &StepRecord, _: &StepRecord| Ok(true);
        assert_eq!(alignment_check(&[], &judge_all).unwrap(), 1.0);
        assert_eq!(alignment_check(&[step("one")], &judge_all).unwrap(), 1.0);

        let steps = vec![step("one"), step("two"), step("three")];
        let judge_second_pair_fails =
            |prev: &StepRecord, _: &StepRecord| Ok(prev.subplan.text != "two");
        assert_eq!(alignment_check(&steps, &judge_second_pair_fails).unwrap(), 0.5);
    }

    #[test]
    fn a_contradictory_step_lowers_alignment() {
        let judge = |prev: &StepRecord, curr: &StepRecord| {
            Ok(!prev.subplan.text.contains("contradicts") && !curr.subplan.text.contains("contradicts"))
        };
        let clean = vec![step("find the total"), step("compare the totals")];
        assert_eq!(alignment_check(&clean, &judge).unwrap(), 1.0);

        let perturbed = vec![
            step("find the total"),
            step("this contradicts the prior total"),
            step("compare the totals"),
        ];
        assert!(alignment_check(&perturbed, &judge).unwrap() < 1.0);
        assert_eq!(alignment_check(&perturbed, &judge).unwrap(), 0.0);
    }

    #[test]
    fn model_judge_reads_yes_no_replies() {
        let rules = vec![
            ScriptRule {
                needles: vec!["Unchanged without it?".to_string(), "fact1".to_string()],
                response: "YES, the conclusion is unchanged.".to_string(),
            },
            ScriptRule {
                needles: vec!["Unchanged without it?".to_string(), "fact2".to_string()],
                response: "No.".to_string(),
            },
            ScriptRule {
                needles: vec!["Aligned?".to_string()],
                response: "yes".to_string(),
            },
        ];
        let client = LlmClient::new(Box::new(ScriptedBackend::new(rules, "hmm")));
        let judge = ModelJudge::new(&client, RunSettings::default());

        let record = step("compare totals");
        let redundant_element = element("fact1", None);
        let needed_element = element("fact2", None);
        assert!(judge.is_redundant(&record, &redundant_element).unwrap());
        assert!(!judge.is_redundant(&record, &needed_element).unwrap());
        assert!(judge.aligned(&step("one"), &step("two")).unwrap());

        // The default reply has no standalone YES/NO token.
        let unread = judge.is_redundant(&record, &element("x", None));
        assert!(matches!(unread, Err(MetricsError::UnreadableJudgment { .. })));
    }

    #[test]
    fn parse_yes_no_finds_the_first_token() {
        assert_eq!(parse_yes_no("YES."), Some(true));
        assert_eq!(parse_yes_no("Well, no - not really."), Some(false));
        assert_eq!(parse_yes_no("Yesterday"), None);
        assert_eq!(parse_yes_no("nothing to say"), None);
        assert_eq!(parse_yes_no("verdict: NO, then yes"), Some(false));
    }

    #[test]
    fn human_scores_average_per_trace() {
        let csv = "\
trace_id,annotator_id,granularity,interpretability
t1,a1,6,8
t1,a2,7,9
t1,a3,8,10
t2,a1,5,5";
        let ingest = ingest_human_scores(csv.as_bytes()).unwrap();
        let t1 = &ingest.by_trace["t1"];
        assert_eq!(t1.granularity, 7.0);
        assert_eq!(t1.interpretability, 9.0);
        assert_eq!(t1.annotators, 3);

        let t2 = &ingest.by_trace["t2"];
        assert_eq!(t2.granularity, 5.0);
        assert_eq!(t2.annotators, 1);
        assert_eq!(
            ingest.warnings,
            vec!["trace t2 scored by 1 annotator(s), expected 3".to_string()]
        );
    }

    #[test]
    fn human_score_validation_rejects_bad_rows() {
        let out_of_range = "trace_id,annotator_id,granularity,interpretability\nt1,a1,11,5";
        assert!(matches!(
            ingest_human_scores(out_of_range.as_bytes()).unwrap_err(),
            MetricsError::ScoreOutOfRange { column: "granularity", value, .. } if value == 11.0
        ));

        let not_a_number = "trace_id,annotator_id,granularity,interpretability\nt1,a1,6,high";
        assert!(matches!(
            ingest_human_scores(not_a_number.as_bytes()).unwrap_err(),
            MetricsError::MalformedScore { row: 2, .. }
        ));
    }

    #[test]
    fn human_score_means_match_brute_force() {
        let mut rng = StdRng::seed_from_u64(23);
        let mut csv = String::from("trace_id,annotator_id,granularity,interpretability\n");
        let mut granularity_scores: Vec<f64> = Vec::new();
        for annotator in 1..=3 {
            let g: f64 = rng.random_range(0..=100) as f64 / 10.0;
            let i: f64 = rng.random_range(0..=100) as f64 / 10.0;
            csv.push_str(&format!("t,a{annotator},{g},{i}\n"));
            granularity_scores.push(g);
        }
        let ingest = ingest_human_scores(csv.as_bytes()).unwrap();
        let expected = granularity_scores.iter().sum::<f64>() / granularity_scores.len() as f64;
        assert!((ingest.by_trace["t"].granularity - expected).abs() < 1e-12);
    }

    fn label_row(id: &str, domain: &str, label: Verdict, gold: bool) -> LabelRow {
        LabelRow { id: id.to_string(), domain: domain.to_string(), label, gold: Some(gold) }
    }

    #[test]
    fn label_accuracy_matches_hand_tally() {
        use Verdict::*;
        let rows = vec![
            label_row("a", "ml", Support, true),
            label_row("b", "ml", Refute, false),
            label_row("c", "ml", Support, false),
            label_row("d", "finance", Refute, true),
        ];
        let table = label_accuracy(&rows, NeiPolicy::Wrong).unwrap();
        assert_eq!(table.overall.accuracy(), Some(0.5));
        assert_eq!(table.domains["ml"].accuracy(), Some(2.0 / 3.0));
        assert_eq!(table.domains["finance"].accuracy(), Some(0.0));

        let empty = label_accuracy(&[], NeiPolicy::Wrong).unwrap();
        assert!(empty.domains.is_empty());
        assert_eq!(empty.overall.records, 0);

        let missing = vec![LabelRow {
            id: "x".to_string(),
            domain: "ml".to_string(),
            label: Support,
            gold: None,
        }];
        assert!(matches!(
            label_accuracy(&missing, NeiPolicy::Wrong).unwrap_err(),
            MetricsError::MissingGold { ref id } if id == "x"
        ));
    }

    #[test]
    fn label_accuracy_matches_an_independent_confusion_tally() {
        use Verdict::*;
        let mut rng = StdRng::seed_from_u64(5);
        let labels = [Support, Refute, NotEnoughInfo];
        for _ in 0..50 {
            let rows: Vec<LabelRow> = (0..rng.random_range(1..=30usize))
                .map(|i| {
                    label_row(
                        &format!("r{i}"),
                        ["ml", "medical"][rng.random_range(0..2usize)],
                        labels[rng.random_range(0..3usize)],
                        rng.random_bool(0.5),
                    )
                })
                .collect();

            for policy in [NeiPolicy::Wrong, NeiPolicy::Excluded] {
                let table = label_accuracy(&rows, policy).unwrap();
                // Independent confusion-matrix style tally.
                let mut scored = 0u64;
                let mut correct = 0u64;
                for row in &rows {
                    let gold = row.gold.unwrap();
                    match row.label {
                        NotEnoughInfo => {
                            if policy == NeiPolicy::Wrong {
                                scored += 1;
                            }
                        }
                        Support => {
                            scored += 1;
                            if gold {
                                correct += 1;
                            }
                        }
                        Refute => {
                            scored += 1;
                            if !gold {
                                correct += 1;
                            }
                        }
                    }
                }
                assert_eq!(table.overall.scored, scored);
                assert_eq!(table.overall.correct, correct);
                let domain_records: u64 =
                    table.domains.values().map(|tally| tally.records).sum();
                assert_eq!(domain_records, rows.len() as u64);
            }
        }
    }

    #[test]
    fn accuracy_table_renders_rows_for_each_domain() {
        use Verdict::*;
        let rows = vec![
            label_row("a", "ml", Support, true),
            label_row("b", "finance", NotEnoughInfo, true),
        ];
        let table = label_accuracy(&rows, NeiPolicy::Wrong).unwrap();
        let text = table.render_text();
        assert!(text.contains("ml"));
        assert!(text.contains("finance"));
        assert!(text.contains("overall"));
        assert_eq!(text.lines().count(), 4); // header + 2 domains + overall
    }

    #[test]
    fn error_histogram_counts_tag_instances() {
        let known: BTreeSet<String> =
            ["t1", "t2", "t3"].iter().map(|s| s.to_string()).collect();
        let annotations = vec![
            ErrorAnnotation {
                trace_id: "t1".to_string(),
                tags: vec![ErrorTag::Snowball, ErrorTag::CoarseGrained],
            },
            ErrorAnnotation { trace_id: "t2".to_string(), tags: vec![ErrorTag::Snowball] },
            ErrorAnnotation { trace_id: "t3".to_string(), tags: vec![] },
        ];
        let histogram = error_histogram(&annotations, &known).unwrap();
        assert_eq!(histogram[&ErrorTag::Snowball], 2);
        assert_eq!(histogram[&ErrorTag::CoarseGrained], 1);
        assert_eq!(histogram[&ErrorTag::ContextualConflict], 0);
        let total: u64 = histogram.values().sum();
        let instances: u64 = annotations.iter().map(|a| a.tags.len() as u64).sum();
        assert_eq!(total, instances);

        let empty = error_histogram(&[], &known).unwrap();
        assert!(empty.values().all(|count| *count == 0));
        assert_eq!(empty.len(), 3);

        let stray = vec![ErrorAnnotation { trace_id: "nope".to_string(), tags: vec![] }];
        assert!(matches!(
            error_histogram(&stray, &known).unwrap_err(),
            MetricsError::UnknownTrace { ref trace_id } if trace_id == "nope"
        ));
    }

    #[test]
    fn trace_metrics_serialize_without_absent_human_scores() {
        let metrics = TraceMetrics {
            accuracy: 0.75,
            redundancy_rate: 0.0,
            alignment_rate: 1.0,
            granularity: None,
            interpretability: None,
        };
        let json = serde_json::to_string(&metrics).unwrap();
        assert!(!json.contains("granularity"));
        let with_scores = TraceMetrics { granularity: Some(7.0), ..metrics };
        let json = serde_json::to_string(&with_scores).unwrap();
        assert!(json.contains("\"granularity\":7.0"));
    }
}
