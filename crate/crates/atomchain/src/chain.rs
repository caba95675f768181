//! The chain trace document and the deterministic stage machine.
//!
//! A verification chain is: interpretation, planning, then for each
//! subplan a grounding / reasoning / recap triple, then one conclusion.
//! The machine is forward-only and driven entirely by which trace fields
//! are filled, so the next stage is always a pure function of the trace.
//! A step recap flagged FALSE short-circuits the chain: the conclusion
//! still runs (with a forced-refute context) and the final label is
//! REFUTE no matter what the conclusion text says.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{CellAddress, Quantity};

/// Schema tag stamped on serialized traces.
pub const TRACE_SCHEMA: &str = "atomchain.trace.v1";

/// Final verdict for a claim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Support,
    Refute,
    NotEnoughInfo,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Verdict::Support => "SUPPORT",
            Verdict::Refute => "REFUTE",
            Verdict::NotEnoughInfo => "NOT_ENOUGH_INFO",
        };
        write!(f, "{s}")
    }
}

/// Step-level outcome parsed from a recap or conclusion flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Flag {
    True,
    False,
    NotEnoughInfo,
}

impl Flag {
    /// The verdict a conclusion-stage flag maps to.
    pub fn verdict(self) -> Verdict {
        match self {
            Flag::True => Verdict::Support,
            Flag::False => Verdict::Refute,
            Flag::NotEnoughInfo => Verdict::NotEnoughInfo,
        }
    }
}

/// The four atomic skills a reasoning step can invoke.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SkillTag {
    ConceptualUnderstanding,
    StructureAnalysis,
    NumericalAnalysis,
    CausalAnalysis,
}

impl SkillTag {
    pub const ALL: [SkillTag; 4] = [
        SkillTag::ConceptualUnderstanding,
        SkillTag::StructureAnalysis,
        SkillTag::NumericalAnalysis,
        SkillTag::CausalAnalysis,
    ];

    /// The phrase a reasoning text uses to name this skill.
    pub fn phrase(self) -> &'static str {
        match self {
            SkillTag::ConceptualUnderstanding => "conceptual understanding",
            SkillTag::StructureAnalysis => "structure analysis",
            SkillTag::NumericalAnalysis => "numerical analysis",
            SkillTag::CausalAnalysis => "causal analysis",
        }
    }

    /// Scans free text for skill mentions, case-insensitively.
    pub fn scan(text: &str) -> BTreeSet<SkillTag> {
        let lower = text.to_lowercase();
        SkillTag::ALL
            .into_iter()
            .filter(|tag| lower.contains(tag.phrase()))
            .collect()
    }
}

impl fmt::Display for SkillTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SkillTag::ConceptualUnderstanding => "CONCEPTUAL_UNDERSTANDING",
            SkillTag::StructureAnalysis => "STRUCTURE_ANALYSIS",
            SkillTag::NumericalAnalysis => "NUMERICAL_ANALYSIS",
            SkillTag::CausalAnalysis => "CAUSAL_ANALYSIS",
        };
        write!(f, "{s}")
    }
}

/// One numbered step of the verification plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subplan {
    pub index: usize,
    pub text: String,
}

/// A cell fact recovered from grounding-stage output: where it points (if
/// the table resolves the mention), the sentence it came from, and the
/// quoted value when present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedFact {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<CellAddress>,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Quantity>,
}

/// Per-subplan record, filled strictly in grounding, reasoning, recap
/// order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub subplan: Subplan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grounding: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extraction: Vec<ExtractedFact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub invoked_skills: BTreeSet<SkillTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recap: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<Flag>,
}

impl StepRecord {
    pub fn new(subplan: Subplan) -> Self {
        StepRecord {
            subplan,
            grounding: None,
            extraction: Vec::new(),
            reasoning: None,
            invoked_skills: BTreeSet::new(),
            recap: None,
            flag: None,
        }
    }

    fn complete(&self) -> bool {
        self.grounding.is_some() && self.reasoning.is_some() && self.recap.is_some()
    }
}

/// Why a chain stopped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Completed,
    EarlyRefute,
    Aborted { reason: AbortReason },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AbortReason {
    /// Planning produced more subplans than the configured cap.
    PlanTooLong { plans: usize, max: usize },
    /// A stage kept producing unparseable output past the retry budget.
    RetriesExhausted { stage: String },
}

/// Token and latency accounting for one stage name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageUsage {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
}

impl StageUsage {
    pub fn add(&mut self, other: &StageUsage) {
        self.calls += other.calls;
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.latency_ms += other.latency_ms;
    }
}

/// The full record of one verification chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub schema: String,
    pub table_ref: String,
    pub claim_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interpretation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<Vec<Subplan>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<StepRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conclusion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub termination: Option<Termination>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub usage: BTreeMap<String, StageUsage>,
}

impl ChainTrace {
    pub fn new(table_ref: &str, claim_ref: &str) -> Self {
        ChainTrace {
            schema: TRACE_SCHEMA.to_string(),
            table_ref: table_ref.to_string(),
            claim_ref: claim_ref.to_string(),
            interpretation: None,
            plan: None,
            steps: Vec::new(),
            conclusion: None,
            label: None,
            termination: None,
            usage: BTreeMap::new(),
        }
    }

    pub fn record_usage(&mut self, stage: &str, usage: &StageUsage) {
        self.usage.entry(stage.to_string()).or_default().add(usage);
    }

    /// Total usage summed over stages.
    pub fn total_usage(&self) -> StageUsage {
        let mut total = StageUsage::default();
        for u in self.usage.values() {
            total.add(u);
        }
        total
    }
}

/// What the orchestrator must do next for a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageRequest {
    Interpretation,
    Planning,
    /// Ground cells for subplan `k` (1-indexed).
    Grounding(usize),
    /// Reason over subplan `k`'s extraction.
    Reasoning(usize),
    /// Recap subplan `k` and read its flag.
    Recap(usize),
    Conclusion { forced_refute: bool },
    Done,
}

/// A specific way a trace breaks the chain invariants.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("plan exists without an interpretation")]
    PlanWithoutInterpretation,
    #[error("plan is empty")]
    EmptyPlan,
    #[error("plan position {position} carries index {index}, expected {expected}")]
    PlanIndexMismatch { position: usize, index: usize, expected: usize },
    #[error("steps exist without a plan")]
    StepsWithoutPlan,
    #[error("{steps} steps exceed the {plans}-subplan plan")]
    MoreStepsThanPlans { steps: usize, plans: usize },
    #[error("step {step} does not match subplan {step} of the plan")]
    StepSubplanMismatch { step: usize },
    #[error("step {step} has no grounding")]
    StepMissingGrounding { step: usize },
    #[error("step {step} fills {later} before {earlier}")]
    FillOrderViolation { step: usize, earlier: &'static str, later: &'static str },
    #[error("step {step} is incomplete but a later step exists")]
    IncompleteInteriorStep { step: usize },
    #[error("step {step} is flagged FALSE but a later step exists")]
    StepAfterFalse { step: usize },
    #[error("conclusion recorded without a termination")]
    ConclusionWithoutTermination,
    #[error("label recorded without a termination")]
    LabelWithoutTermination,
    #[error("terminated trace is missing a conclusion")]
    TerminatedWithoutConclusion,
    #[error("terminated trace is missing a label")]
    TerminatedWithoutLabel,
    #[error("COMPLETED trace left subplans unexecuted")]
    CompletedWithUnfinishedPlan,
    #[error("COMPLETED trace contains a FALSE step flag")]
    CompletedWithFalseStep,
    #[error("EARLY_REFUTE trace has no final FALSE step flag")]
    EarlyRefuteWithoutFalseStep,
    #[error("EARLY_REFUTE trace carries label {label}, expected REFUTE")]
    EarlyRefuteWrongLabel { label: Verdict },
    #[error("ABORTED trace carries label {label}, expected NOT_ENOUGH_INFO")]
    AbortedWrongLabel { label: Verdict },
}

/// A trace the stage machine refuses to advance.
#[derive(Debug, Error)]
#[error("trace violates chain invariants: {}", format_violations(.violations))]
pub struct InvalidTrace {
    pub violations: Vec<Violation>,
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Checks every chain invariant; an empty list means the trace is
/// well-formed for the stage machine.
pub fn validate_trace(trace: &ChainTrace) -> Vec<Violation> {
    let mut violations = Vec::new();

    if trace.plan.is_some() && trace.interpretation.is_none() {
        violations.push(Violation::PlanWithoutInterpretation);
    }
    if let Some(plan) = &trace.plan {
        if plan.is_empty() {
            violations.push(Violation::EmptyPlan);
        }
        for (i, subplan) in plan.iter().enumerate() {
            if subplan.index != i + 1 {
                violations.push(Violation::PlanIndexMismatch {
                    position: i + 1,
                    index: subplan.index,
                    expected: i + 1,
                });
            }
        }
    }

    match &trace.plan {
        None => {
            if !trace.steps.is_empty() {
                violations.push(Violation::StepsWithoutPlan);
            }
        }
        Some(plan) => {
            if trace.steps.len() > plan.len() {
                violations.push(Violation::MoreStepsThanPlans {
                    steps: trace.steps.len(),
                    plans: plan.len(),
                });
            }
            for (i, step) in trace.steps.iter().enumerate() {
                if let Some(subplan) = plan.get(i) {
                    if &step.subplan != subplan {
                        violations.push(Violation::StepSubplanMismatch { step: i + 1 });
                    }
                }
            }
        }
    }

    let last = trace.steps.len();
    for (i, step) in trace.steps.iter().enumerate() {
        let n = i + 1;
        if step.grounding.is_none() {
            violations.push(Violation::StepMissingGrounding { step: n });
        }
        if step.reasoning.is_some() && step.grounding.is_none() {
            violations.push(Violation::FillOrderViolation { step: n, earlier: "grounding", later: "reasoning" });
        }
        if step.recap.is_some() && step.reasoning.is_none() {
            violations.push(Violation::FillOrderViolation { step: n, earlier: "reasoning", later: "recap" });
        }
        if step.flag.is_some() && step.recap.is_none() {
            violations.push(Violation::FillOrderViolation { step: n, earlier: "recap", later: "flag" });
        }
        if n < last {
            if !step.complete() {
                violations.push(Violation::IncompleteInteriorStep { step: n });
            }
            if step.flag == Some(Flag::False) {
                violations.push(Violation::StepAfterFalse { step: n });
            }
        }
    }

    match &trace.termination {
        None => {
            if trace.conclusion.is_some() {
                violations.push(Violation::ConclusionWithoutTermination);
            }
            if trace.label.is_some() {
                violations.push(Violation::LabelWithoutTermination);
            }
        }
        Some(termination) => {
            if trace.conclusion.is_none() {
                // Aborted chains may stop before any conclusion ran.
                if !matches!(termination, Termination::Aborted { .. }) {
                    violations.push(Violation::TerminatedWithoutConclusion);
                }
            }
            match (termination, trace.label) {
                (_, None) => violations.push(Violation::TerminatedWithoutLabel),
                (Termination::Completed, Some(_)) => {
                    let plan_len = trace.plan.as_ref().map(Vec::len).unwrap_or(0);
                    if trace.steps.len() < plan_len {
                        violations.push(Violation::CompletedWithUnfinishedPlan);
                    }
                    if trace.steps.iter().any(|s| s.flag == Some(Flag::False)) {
                        violations.push(Violation::CompletedWithFalseStep);
                    }
                }
                (Termination::EarlyRefute, Some(label)) => {
                    if trace.steps.last().map(|s| s.flag) != Some(Some(Flag::False)) {
                        violations.push(Violation::EarlyRefuteWithoutFalseStep);
                    }
                    if label != Verdict::Refute {
                        violations.push(Violation::EarlyRefuteWrongLabel { label });
                    }
                }
                (Termination::Aborted { .. }, Some(label)) => {
                    if label != Verdict::NotEnoughInfo {
                        violations.push(Violation::AbortedWrongLabel { label });
                    }
                }
            }
        }
    }

    violations
}

/// The next stage for a well-formed trace. Pure: the same trace always
/// yields the same request.
pub fn next_stage(trace: &ChainTrace) -> Result<StageRequest, InvalidTrace> {
    let violations = validate_trace(trace);
    if !violations.is_empty() {
        return Err(InvalidTrace { violations });
    }

    if trace.termination.is_some() {
        return Ok(StageRequest::Done);
    }
    if trace.interpretation.is_none() {
        return Ok(StageRequest::Interpretation);
    }
    let Some(plan) = &trace.plan else {
        return Ok(StageRequest::Planning);
    };

    if let Some(step) = trace.steps.last() {
        let k = trace.steps.len();
        if step.reasoning.is_none() {
            return Ok(StageRequest::Reasoning(k));
        }
        if step.recap.is_none() {
            return Ok(StageRequest::Recap(k));
        }
        // FALSE wins over plan progress: the chain stops here and the
        // conclusion runs in forced-refute mode, even on the last step.
        if step.flag == Some(Flag::False) {
            return Ok(StageRequest::Conclusion { forced_refute: true });
        }
        if k == plan.len() {
            return Ok(StageRequest::Conclusion { forced_refute: false });
        }
        return Ok(StageRequest::Grounding(k + 1));
    }
    Ok(StageRequest::Grounding(1))
}
