//! Drives verification chains: render the stage prompt, generate, parse,
//! update the trace, and ask the stage machine what comes next. Also
//! provides multipath cross-validation and a resumable batch driver.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{
    next_stage, AbortReason, ChainTrace, InvalidTrace, SkillTag, StageRequest, StageUsage,
    StepRecord, Termination, Verdict,
};
use crate::client::{ClientError, GenerationRequest, LlmClient, Message};
use crate::outputs::{extract_cell_facts, parse_flag, parse_plans, parse_tagged};
use crate::prompt::{Placeholder, RenderContext, RenderedPrompt, TemplateError, TemplateId, TemplateSet};
use crate::table::Table;

/// Schema tag stamped on serialized verification records.
pub const RECORD_SCHEMA: &str = "atomchain.record.v1";

/// Usage/attempt key for the single-call short-thought path.
pub const SHORT_THOUGHT_STAGE: &str = "short";

/// Tuning knobs for one chain run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub model: String,
    pub temperature: f64,
    pub nucleus_p: f64,
    pub max_tokens: u32,
    /// Base sampling seed; retries bump it by one per regeneration and
    /// multipath offsets it per path.
    pub seed: Option<u64>,
    /// A plan longer than this aborts the chain.
    pub max_plans: usize,
    /// How many times a stage may be re-asked after unparseable output.
    pub stage_retries: u32,
    /// When set, the recap prompt's reasoning slot also carries the
    /// transitions of earlier steps, not just the current reasoning.
    pub include_prior_recaps: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            model: "atomchain-local".to_string(),
            temperature: 0.8,
            nucleus_p: 0.9,
            max_tokens: 1024,
            seed: None,
            max_plans: 8,
            stage_retries: 3,
            include_prior_recaps: false,
        }
    }
}

/// How NOT_ENOUGH_INFO predictions score against binary gold labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeiPolicy {
    /// NEI counts as a wrong prediction (scored, not correct).
    #[default]
    Wrong,
    /// NEI predictions are dropped from the accuracy denominator.
    Excluded,
}

/// One verified claim: the final label plus the full chain trace and
/// per-stage generation-attempt counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub schema: String,
    pub claim_id: String,
    pub label: Verdict,
    pub trace: ChainTrace,
    pub attempts: BTreeMap<String, u32>,
    pub wall_time_ms: u64,
}

impl VerificationRecord {
    fn from_trace(
        claim_id: &str,
        trace: ChainTrace,
        attempts: BTreeMap<String, u32>,
        wall_time_ms: u64,
    ) -> VerificationRecord {
        let label = trace.label.expect("terminated trace carries a label");
        VerificationRecord {
            schema: RECORD_SCHEMA.to_string(),
            claim_id: claim_id.to_string(),
            label,
            trace,
            attempts,
            wall_time_ms,
        }
    }
}

/// Outcome of k-path cross-validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultipathResult {
    pub records: Vec<VerificationRecord>,
    pub agreed_label: Option<Verdict>,
    pub needs_adjudication: bool,
}

impl MultipathResult {
    /// Majority vote over already-computed records; `needs_adjudication`
    /// is set exactly when no label holds a strict majority.
    pub fn from_records(records: Vec<VerificationRecord>) -> MultipathResult {
        let labels: Vec<Verdict> = records.iter().map(|r| r.label).collect();
        let agreed_label = majority_label(&labels);
        MultipathResult { records, agreed_label, needs_adjudication: agreed_label.is_none() }
    }
}

/// The label held by a strict majority (> half) of the votes, if any.
pub fn majority_label(labels: &[Verdict]) -> Option<Verdict> {
    let mut counts: BTreeMap<Verdict, usize> = BTreeMap::new();
    for label in labels {
        *counts.entry(*label).or_insert(0) += 1;
    }
    counts.into_iter().find(|(_, count)| count * 2 > labels.len()).map(|(label, _)| label)
}

/// One claim of a batch run.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub id: String,
    pub domain: String,
    pub table: Table,
    pub claim: String,
    /// Binary gold label: true = supported, false = refuted.
    pub gold: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub concurrency: usize,
    pub nei_policy: NeiPolicy,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions { concurrency: 4, nei_policy: NeiPolicy::Wrong }
    }
}

/// Per-domain label counts and accuracy tallies for records computed in
/// one run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainTally {
    pub records: u64,
    pub support: u64,
    pub refute: u64,
    pub not_enough_info: u64,
    pub with_gold: u64,
    /// Records in the accuracy denominator (depends on the NEI policy).
    pub scored: u64,
    pub correct: u64,
}

impl DomainTally {
    pub fn accuracy(&self) -> Option<f64> {
        (self.scored > 0).then(|| self.correct as f64 / self.scored as f64)
    }

    pub fn count(&mut self, label: Verdict, gold: Option<bool>, policy: NeiPolicy) {
        self.records += 1;
        match label {
            Verdict::Support => self.support += 1,
            Verdict::Refute => self.refute += 1,
            Verdict::NotEnoughInfo => self.not_enough_info += 1,
        }
        let Some(gold) = gold else { return };
        self.with_gold += 1;
        match label {
            Verdict::NotEnoughInfo => {
                if policy == NeiPolicy::Wrong {
                    self.scored += 1;
                }
            }
            predicted => {
                self.scored += 1;
                if (predicted == Verdict::Support) == gold {
                    self.correct += 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchFailure {
    pub id: String,
    pub error: String,
}

/// Summary of one batch run. Domain tallies cover only records computed
/// in this run; rerun `report` over the record store for full-run
/// accuracy after a resume.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub total: usize,
    pub computed: usize,
    pub skipped: usize,
    pub failed: usize,
    pub domains: BTreeMap<String, DomainTally>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<BatchFailure>,
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("backend failure in {stage} stage: {source}")]
    Backend {
        stage: String,
        #[source]
        source: ClientError,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    InvalidChain(#[from] InvalidTrace),
    #[error("multipath needs an odd path count >= 1, got {k}")]
    BadPathCount { k: usize },
    #[error("failed to persist record {id}: {source}")]
    Persist {
        id: String,
        #[source]
        source: std::io::Error,
    },
}

/// Renders a plan back to its bracketed wire form.
pub fn render_plan(plan: &[crate::chain::Subplan]) -> String {
    plan.iter()
        .map(|p| format!("[Plan {} Start]{} [Plan {} End]", p.index, p.text, p.index))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// What applying one stage response did to the trace.
enum Applied {
    Advanced,
    /// Well-formed output that nonetheless ends the chain (plan cap).
    Abort(AbortReason),
    /// Unparseable output; worth re-asking.
    Slip,
}

/// A chain runner bound to one client and template bundle.
pub struct Verifier<'a> {
    client: &'a LlmClient,
    templates: &'a TemplateSet,
    settings: RunSettings,
}

impl<'a> Verifier<'a> {
    pub fn new(client: &'a LlmClient, templates: &'a TemplateSet, settings: RunSettings) -> Self {
        Verifier { client, templates, settings }
    }

    pub fn settings(&self) -> &RunSettings {
        &self.settings
    }

    /// Runs one full chain for a claim.
    pub fn verify(
        &self,
        table: &Table,
        claim_id: &str,
        claim: &str,
    ) -> Result<VerificationRecord, OrchestratorError> {
        self.verify_seeded(table, claim_id, claim, self.settings.seed)
    }

    fn verify_seeded(
        &self,
        table: &Table,
        claim_id: &str,
        claim: &str,
        seed: Option<u64>,
    ) -> Result<VerificationRecord, OrchestratorError> {
        let start = Instant::now();
        let mut trace = ChainTrace::new(&table.caption, claim_id);
        let mut attempts = BTreeMap::new();
        loop {
            match next_stage(&trace)? {
                StageRequest::Done => break,
                request => {
                    self.run_stage(&mut trace, &mut attempts, table, claim, request, seed)?;
                }
            }
        }
        Ok(VerificationRecord::from_trace(
            claim_id,
            trace,
            attempts,
            start.elapsed().as_millis() as u64,
        ))
    }

    /// Runs k independent chains with per-path seed offsets and takes a
    /// strict-majority vote. With no seed and a deterministic backend the
    /// paths coincide; live backends still resample at temperature.
    pub fn multipath_verify(
        &self,
        table: &Table,
        claim_id: &str,
        claim: &str,
        k: usize,
    ) -> Result<MultipathResult, OrchestratorError> {
        if k == 0 || k % 2 == 0 {
            return Err(OrchestratorError::BadPathCount { k });
        }
        let mut records = Vec::with_capacity(k);
        for path in 0..k {
            let seed = self.settings.seed.map(|s| s.wrapping_add((path as u64) << 32));
            records.push(self.verify_seeded(table, claim_id, claim, seed)?);
        }
        Ok(MultipathResult::from_records(records))
    }

    /// Single-call intuitive verdict: no plan, no steps, one prompt. The
    /// record's trace holds just the conclusion and label.
    pub fn short_thought_verify(
        &self,
        table: &Table,
        claim_id: &str,
        claim: &str,
    ) -> Result<VerificationRecord, OrchestratorError> {
        let start = Instant::now();
        let rendered = RenderedPrompt {
            system: "You are a careful scientific table analyst. Decide in one step whether \
                     the claim is supported by the table, refuted by it, or cannot be verified \
                     from the table alone. Wrap your verdict in <conclusion></conclusion> and \
                     end with exactly one flag: <flag>True</flag> if supported, \
                     <flag>False</flag> if refuted, or <flag>Not enough information</flag> \
                     otherwise."
                .to_string(),
            user: format!(
                "### Table Content\n{caption}\n\n{table}\n\n### Claim\n{claim}\n\n### Your Verdict",
                caption = table.caption,
                table = table.render(),
            ),
        };
        let mut trace = ChainTrace::new(&table.caption, claim_id);
        let mut attempts = BTreeMap::new();
        self.generate_with_retries(
            &mut trace,
            &mut attempts,
            SHORT_THOUGHT_STAGE,
            &rendered,
            self.settings.seed,
            |trace, text| {
                let scan = parse_flag(text);
                let Some(flag) = scan.flag else { return Applied::Slip };
                let conclusion = match parse_tagged(text, "conclusion") {
                    Ok(block) => block.inner.trim().to_string(),
                    Err(_) => text.trim().to_string(),
                };
                trace.conclusion = Some(conclusion);
                trace.label = Some(flag.value.verdict());
                trace.termination = Some(Termination::Completed);
                Applied::Advanced
            },
        )?;
        Ok(VerificationRecord::from_trace(
            claim_id,
            trace,
            attempts,
            start.elapsed().as_millis() as u64,
        ))
    }

    /// Verifies every not-yet-persisted item with a bounded worker pool,
    /// persisting records in dataset order as they complete. Per-item
    /// failures are counted and skipped; persistence failures abort the
    /// run (already-persisted records survive).
    pub fn batch_verify(
        &self,
        items: &[BatchItem],
        existing: &BTreeSet<String>,
        options: &BatchOptions,
        persist: &mut dyn FnMut(&VerificationRecord) -> std::io::Result<()>,
    ) -> Result<RunSummary, OrchestratorError> {
        let todo: Vec<&BatchItem> =
            items.iter().filter(|item| !existing.contains(&item.id)).collect();
        let mut summary = RunSummary {
            total: items.len(),
            skipped: items.len() - todo.len(),
            ..RunSummary::default()
        };
        if todo.is_empty() {
            return Ok(summary);
        }

        let workers = options.concurrency.max(1).min(todo.len());
        let cursor = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel::<(usize, Result<VerificationRecord, OrchestratorError>)>();
        let outcome: Result<(), OrchestratorError> = thread::scope(|scope| {
            for _ in 0..workers {
                let tx = tx.clone();
                let cursor = &cursor;
                let todo = &todo;
                scope.spawn(move || loop {
                    let i = cursor.fetch_add(1, Ordering::SeqCst);
                    let Some(item) = todo.get(i) else { break };
                    let result = self.verify(&item.table, &item.id, &item.claim);
                    if tx.send((i, result)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);

            // Reorder buffer: completions arrive in any order but are
            // persisted in dataset order.
            let mut pending: BTreeMap<usize, Result<VerificationRecord, OrchestratorError>> =
                BTreeMap::new();
            let mut next = 0usize;
            for (i, result) in rx {
                pending.insert(i, result);
                while let Some(result) = pending.remove(&next) {
                    let item = todo[next];
                    next += 1;
                    match result {
                        Ok(record) => {
                            persist(&record).map_err(|source| OrchestratorError::Persist {
                                id: item.id.clone(),
                                source,
                            })?;
                            summary.computed += 1;
                            summary
                                .domains
                                .entry(item.domain.clone())
                                .or_default()
                                .count(record.label, item.gold, options.nei_policy);
                        }
                        Err(error) => {
                            summary.failed += 1;
                            summary
                                .failures
                                .push(BatchFailure { id: item.id.clone(), error: error.to_string() });
                        }
                    }
                }
            }
            Ok(())
        });
        outcome?;
        Ok(summary)
    }

    fn run_stage(
        &self,
        trace: &mut ChainTrace,
        attempts: &mut BTreeMap<String, u32>,
        table: &Table,
        claim: &str,
        request: StageRequest,
        seed: Option<u64>,
    ) -> Result<(), OrchestratorError> {
        let (id, context) = self.stage_context(trace, table, claim, request);
        let rendered = self.templates.render(id, &context)?;
        let settings = &self.settings;
        self.generate_with_retries(
            trace,
            attempts,
            id.name(),
            &rendered,
            seed,
            |trace, text| Self::apply(trace, table, request, text, settings),
        )
    }

    /// Asks one prompt until `apply` accepts the output or the retry
    /// budget runs out (which aborts the trace with NOT_ENOUGH_INFO).
    /// Every call is charged to the trace, even unparseable ones.
    fn generate_with_retries(
        &self,
        trace: &mut ChainTrace,
        attempts: &mut BTreeMap<String, u32>,
        key: &str,
        rendered: &RenderedPrompt,
        seed: Option<u64>,
        mut apply: impl FnMut(&mut ChainTrace, &str) -> Applied,
    ) -> Result<(), OrchestratorError> {
        let mut attempt: u32 = 0;
        loop {
            attempt += 1;
            *attempts.entry(key.to_string()).or_insert(0) += 1;
            let request = GenerationRequest {
                model: self.settings.model.clone(),
                messages: vec![
                    Message::system(rendered.system.clone()),
                    Message::user(rendered.user.clone()),
                ],
                temperature: self.settings.temperature,
                top_p: self.settings.nucleus_p,
                max_tokens: self.settings.max_tokens,
                // Regenerations nudge the seed so a seeded live backend
                // does not reproduce the same malformed output verbatim.
                seed: seed.map(|s| s.wrapping_add(u64::from(attempt - 1))),
                top_k: None,
            };
            let outcome = self
                .client
                .generate(&request)
                .map_err(|source| OrchestratorError::Backend { stage: key.to_string(), source })?;
            trace.record_usage(
                key,
                &StageUsage {
                    calls: 1,
                    prompt_tokens: outcome.usage.prompt_tokens,
                    completion_tokens: outcome.usage.completion_tokens,
                    latency_ms: outcome.latency_ms,
                },
            );
            match apply(trace, &outcome.text) {
                Applied::Advanced => return Ok(()),
                Applied::Abort(reason) => {
                    Self::abort(trace, reason);
                    return Ok(());
                }
                Applied::Slip if attempt <= self.settings.stage_retries => continue,
                Applied::Slip => {
                    Self::abort(trace, AbortReason::RetriesExhausted { stage: key.to_string() });
                    return Ok(());
                }
            }
        }
    }

    fn abort(trace: &mut ChainTrace, reason: AbortReason) {
        trace.label = Some(Verdict::NotEnoughInfo);
        trace.termination = Some(Termination::Aborted { reason });
    }

    fn stage_context(
        &self,
        trace: &ChainTrace,
        table: &Table,
        claim: &str,
        request: StageRequest,
    ) -> (TemplateId, RenderContext) {
        let base = RenderContext::new()
            .set(Placeholder::Caption, table.caption.clone())
            .set(Placeholder::Table, table.render())
            .set(Placeholder::Claim, claim);
        match request {
            StageRequest::Interpretation => (TemplateId::Interpret, base),
            StageRequest::Planning => {
                let interpretation =
                    trace.interpretation.clone().expect("planning follows interpretation");
                (TemplateId::Plan, base.set(Placeholder::Interpretation, interpretation))
            }
            StageRequest::Grounding(k) => {
                let subplan = &trace.plan.as_ref().expect("grounding follows planning")[k - 1];
                (
                    TemplateId::Cell,
                    base.set(Placeholder::Subplan, subplan.text.clone())
                        .set(Placeholder::PlanIdx, k.to_string()),
                )
            }
            StageRequest::Reasoning(k) => {
                let step = &trace.steps[k - 1];
                let grounding =
                    step.grounding.clone().expect("reasoning follows grounding");
                (
                    TemplateId::Reason,
                    base.set(Placeholder::Subplan, step.subplan.text.clone())
                        .set(Placeholder::PlanIdx, k.to_string())
                        .set(Placeholder::GroundingExtraction, grounding),
                )
            }
            StageRequest::Recap(k) => {
                let step = &trace.steps[k - 1];
                let mut parts: Vec<String> = Vec::new();
                if self.settings.include_prior_recaps {
                    parts.extend(trace.steps[..k - 1].iter().filter_map(|s| s.recap.clone()));
                }
                parts.push(step.reasoning.clone().expect("recap follows reasoning"));
                (
                    TemplateId::Recap,
                    base.set(Placeholder::Plan, render_plan(trace.plan.as_ref().unwrap()))
                        .set(Placeholder::Subplan, step.subplan.text.clone())
                        .set(Placeholder::Reasoning, parts.join("\n\n"))
                        .set(Placeholder::PlanIdx, k.to_string()),
                )
            }
            StageRequest::Conclusion { .. } => {
                let transitions: Vec<String> = trace
                    .steps
                    .iter()
                    .map(|step| {
                        format!(
                            "{}\n{}",
                            step.reasoning.as_deref().unwrap_or(""),
                            step.recap.as_deref().unwrap_or(""),
                        )
                    })
                    .collect();
                (
                    TemplateId::Conclusion,
                    base.set(Placeholder::Plan, render_plan(trace.plan.as_ref().unwrap()))
                        .set(Placeholder::AllReasonTransition, transitions.join("\n\n")),
                )
            }
            StageRequest::Done => unreachable!("run_stage is never called with Done"),
        }
    }

    fn apply(
        trace: &mut ChainTrace,
        table: &Table,
        request: StageRequest,
        text: &str,
        settings: &RunSettings,
    ) -> Applied {
        match request {
            StageRequest::Interpretation => {
                let trimmed = text.trim();
                if trimmed.is_empty() {
                    return Applied::Slip;
                }
                trace.interpretation = Some(trimmed.to_string());
                Applied::Advanced
            }
            StageRequest::Planning => match parse_plans(text) {
                Err(_) => Applied::Slip,
                Ok(plans) if plans.len() > settings.max_plans => Applied::Abort(
                    AbortReason::PlanTooLong { plans: plans.len(), max: settings.max_plans },
                ),
                Ok(plans) => {
                    trace.plan = Some(plans);
                    Applied::Advanced
                }
            },
            StageRequest::Grounding(k) => {
                if parse_tagged(text, "grounding").is_err() {
                    return Applied::Slip;
                }
                let Ok(extraction) = parse_tagged(text, "extraction") else {
                    return Applied::Slip;
                };
                let subplan = trace.plan.as_ref().unwrap()[k - 1].clone();
                let mut step = StepRecord::new(subplan);
                // The raw response (both tag blocks) feeds the reasoning
                // prompt; the parsed facts make the step machine-checkable.
                step.grounding = Some(text.trim().to_string());
                step.extraction = extract_cell_facts(&extraction.inner, table);
                trace.steps.push(step);
                Applied::Advanced
            }
            StageRequest::Reasoning(k) => {
                let trimmed = text.trim();
                if trimmed.is_empty() {
                    return Applied::Slip;
                }
                let step = &mut trace.steps[k - 1];
                step.reasoning = Some(trimmed.to_string());
                step.invoked_skills = SkillTag::scan(text);
                Applied::Advanced
            }
            StageRequest::Recap(k) => {
                let trimmed = text.trim();
                if trimmed.is_empty() {
                    return Applied::Slip;
                }
                let step = &mut trace.steps[k - 1];
                step.recap = Some(trimmed.to_string());
                // A recap without a readable flag continues the chain,
                // exactly like an explicit "not enough information".
                step.flag = parse_flag(text).flag.map(|f| f.value);
                Applied::Advanced
            }
            StageRequest::Conclusion { forced_refute } => {
                let Ok(block) = parse_tagged(text, "conclusion") else {
                    return Applied::Slip;
                };
                let flag = parse_flag(text).flag.map(|f| f.value);
                if forced_refute {
                    // A FALSE step flag already decided the label; the
                    // conclusion prose is kept but cannot override it.
                    trace.conclusion = Some(block.inner.trim().to_string());
                    trace.label = Some(Verdict::Refute);
                    trace.termination = Some(Termination::EarlyRefute);
                    return Applied::Advanced;
                }
                let Some(flag) = flag else { return Applied::Slip };
                trace.conclusion = Some(block.inner.trim().to_string());
                trace.label = Some(flag.verdict());
                trace.termination = Some(Termination::Completed);
                Applied::Advanced
            }
            StageRequest::Done => unreachable!("apply is never called with Done"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::Flag;
    use crate::client::{
        BackendError, BackendReply, GenerationBackend, ScriptRule, ScriptedBackend, TokenUsage,
    };
    use crate::testdata::{perf_table, rule};
    use std::sync::atomic::AtomicBool;
    use std::sync::{Arc, Mutex};
    use std::time::Duration;

    const CLAIM: &str = "FINE-TUNED-DISCRIMINATIVE modeling outperforms CS-ONLY-DISCRIMINATIVE \
                         model on test perplexity, test accuracy, and test word-error-rate.";

    fn chain_script(plans: usize, flags: &[&str], conclusion: &str) -> Vec<ScriptRule> {
        crate::testdata::chain_script("", plans, flags, conclusion)
    }

    fn client_for(rules: Vec<ScriptRule>) -> LlmClient {
        LlmClient::new(Box::new(ScriptedBackend::new(rules, "UNSCRIPTED")))
            .with_backoff_base(Duration::ZERO)
    }

    fn verifier<'a>(
        client: &'a LlmClient,
        templates: &'a TemplateSet,
        settings: RunSettings,
    ) -> Verifier<'a> {
        Verifier::new(client, templates, settings)
    }

    #[test]
    fn one_plan_true_chain_supports_in_six_calls() {
        let templates = TemplateSet::default_bundle();
        let client = client_for(chain_script(
            1,
            &["True"],
            "<conclusion>The claim holds on every metric.</conclusion> <flag>True</flag>",
        ));
        let v = verifier(&client, &templates, RunSettings::default());
        let record = v.verify(&perf_table(), "c1", CLAIM).unwrap();

        assert_eq!(record.label, Verdict::Support);
        assert_eq!(record.trace.label, Some(Verdict::Support));
        assert_eq!(record.trace.termination, Some(Termination::Completed));
        assert_eq!(record.trace.total_usage().calls, 6);
        let keys: Vec<&str> = record.trace.usage.keys().map(String::as_str).collect();
        assert_eq!(keys, vec!["cell", "conclusion", "interpret", "plan", "reason", "recap"]);
        for usage in record.trace.usage.values() {
            assert_eq!(usage.calls, 1);
        }
        assert_eq!(record.attempts.values().sum::<u32>(), 6);
        assert_eq!(record.trace.steps.len(), 1);
        assert_eq!(record.trace.steps[0].flag, Some(Flag::True));
        assert!(!record.trace.steps[0].extraction.is_empty());
        assert!(record.trace.steps[0]
            .invoked_skills
            .contains(&crate::chain::SkillTag::NumericalAnalysis));
        assert_eq!(record.schema, RECORD_SCHEMA);
    }

    #[test]
    fn early_false_flag_refutes_in_six_calls_overriding_conclusion() {
        let templates = TemplateSet::default_bundle();
        // The conclusion even claims TRUE; the FALSE step flag must win.
        let client = client_for(chain_script(
            3,
            &["False", "True", "True"],
            "<conclusion>Looks fine after all.</conclusion> <flag>True</flag>",
        ));
        let v = verifier(&client, &templates, RunSettings::default());
        let record = v.verify(&perf_table(), "c1", CLAIM).unwrap();

        assert_eq!(record.label, Verdict::Refute);
        assert_eq!(record.trace.termination, Some(Termination::EarlyRefute));
        assert_eq!(record.trace.steps.len(), 1);
        assert_eq!(record.trace.total_usage().calls, 6);
    }

    #[test]
    fn nei_and_missing_flags_continue_to_the_conclusion() {
        let templates = TemplateSet::default_bundle();
        let client = client_for(chain_script(
            2,
            &["Not enough information", ""],
            "<conclusion>The table cannot settle the claim.</conclusion> \
             <flag>Not enough information</flag>",
        ));
        let v = verifier(&client, &templates, RunSettings::default());
        let record = v.verify(&perf_table(), "c1", CLAIM).unwrap();

        assert_eq!(record.label, Verdict::NotEnoughInfo);
        assert_eq!(record.trace.termination, Some(Termination::Completed));
        assert_eq!(record.trace.steps.len(), 2);
        assert_eq!(record.trace.steps[0].flag, Some(Flag::NotEnoughInfo));
        assert_eq!(record.trace.steps[1].flag, None);
        // 2 setup calls + 2 steps x 3 + 1 conclusion.
        assert_eq!(record.trace.total_usage().calls, 9);
    }

    #[test]
    fn oversized_plan_aborts_with_not_enough_info() {
        let templates = TemplateSet::default_bundle();
        let client = client_for(chain_script(
            9,
            &[],
            "<conclusion>never reached</conclusion> <flag>True</flag>",
        ));
        let mut settings = RunSettings::default();
        settings.max_plans = 8;
        let v = verifier(&client, &templates, settings);
        let record = v.verify(&perf_table(), "c1", CLAIM).unwrap();

        assert_eq!(record.label, Verdict::NotEnoughInfo);
        assert_eq!(
            record.trace.termination,
            Some(Termination::Aborted {
                reason: AbortReason::PlanTooLong { plans: 9, max: 8 }
            })
        );
        assert!(record.trace.steps.is_empty());
        assert!(record.trace.conclusion.is_none());
        assert_eq!(record.trace.total_usage().calls, 2);
    }

    #[test]
    fn exhausted_stage_retries_abort_with_not_enough_info() {
        let templates = TemplateSet::default_bundle();
        // No grounding rule: the cell stage keeps getting UNSCRIPTED text.
        let mut rules =
            vec![rule(&["### Your Interpretation of Claim"], "The claim compares two models.")];
        rules.push(rule(&["### Your Plan"], "[Plan 1 Start]verify part 1 [Plan 1 End]"));
        let client = client_for(rules);
        let mut settings = RunSettings::default();
        settings.stage_retries = 2;
        let v = verifier(&client, &templates, settings);
        let record = v.verify(&perf_table(), "c1", CLAIM).unwrap();

        assert_eq!(record.label, Verdict::NotEnoughInfo);
        assert_eq!(
            record.trace.termination,
            Some(Termination::Aborted {
                reason: AbortReason::RetriesExhausted { stage: "cell".to_string() }
            })
        );
        assert_eq!(record.attempts["cell"], 3);
        assert_eq!(record.trace.usage["cell"].calls, 3);
        assert_eq!(record.trace.total_usage().calls, 5);
    }

    /// Serves garbage for the first matching call, then delegates.
    struct FlakyBackend {
        inner: ScriptedBackend,
        needle: &'static str,
        tripped: AtomicBool,
    }

    impl GenerationBackend for FlakyBackend {
        fn id(&self) -> &'static str {
            "flaky"
        }

        fn generate(&self, request: &GenerationRequest) -> Result<BackendReply, BackendError> {
            let latest = request
                .messages
                .iter()
                .rev()
                .find(|m| matches!(m.role, crate::client::Role::User))
                .map(|m| m.content.as_str())
                .unwrap_or("");
            if latest.contains(self.needle) && !self.tripped.swap(true, Ordering::SeqCst) {
                return Ok(BackendReply {
                    text: "mangled output without any tags".to_string(),
                    usage: TokenUsage { prompt_tokens: 0, completion_tokens: 5 },
                    latency_ms: 0,
                    served_from_replay: false,
                });
            }
            self.inner.generate(request)
        }
    }

    #[test]
    fn a_parse_slip_consumes_one_retry_then_recovers() {
        let templates = TemplateSet::default_bundle();
        let script = ScriptedBackend::new(
            chain_script(
                1,
                &["True"],
                "<conclusion>Verified.</conclusion> <flag>True</flag>",
            ),
            "UNSCRIPTED",
        );
        let backend = FlakyBackend {
            inner: script,
            needle: "### Your Grounding and Extraction",
            tripped: AtomicBool::new(false),
        };
        let client = LlmClient::new(Box::new(backend)).with_backoff_base(Duration::ZERO);
        let mut settings = RunSettings::default();
        settings.seed = Some(7);
        let v = verifier(&client, &templates, settings);
        let record = v.verify(&perf_table(), "c1", CLAIM).unwrap();

        assert_eq!(record.label, Verdict::Support);
        assert_eq!(record.attempts["cell"], 2);
        assert_eq!(record.trace.usage["cell"].calls, 2);
        assert_eq!(record.trace.total_usage().calls, 7);
    }

    /// Logs every request while delegating to a script.
    struct RecordingBackend {
        inner: ScriptedBackend,
        log: Arc<Mutex<Vec<GenerationRequest>>>,
    }

    impl GenerationBackend for RecordingBackend {
        fn id(&self) -> &'static str {
            "recording"
        }

        fn generate(&self, request: &GenerationRequest) -> Result<BackendReply, BackendError> {
            self.log.lock().unwrap().push(request.clone());
            self.inner.generate(request)
        }
    }

    fn recording_client(
        rules: Vec<ScriptRule>,
    ) -> (LlmClient, Arc<Mutex<Vec<GenerationRequest>>>) {
        let log = Arc::new(Mutex::new(Vec::new()));
        let backend =
            RecordingBackend { inner: ScriptedBackend::new(rules, "UNSCRIPTED"), log: log.clone() };
        (LlmClient::new(Box::new(backend)).with_backoff_base(Duration::ZERO), log)
    }

    fn user_text(request: &GenerationRequest) -> &str {
        &request.messages[1].content
    }

    #[test]
    fn stage_requests_respect_locality() {
        let templates = TemplateSet::default_bundle();
        let (client, log) = recording_client(chain_script(
            2,
            &["True", "True"],
            "<conclusion>Verified.</conclusion> <flag>True</flag>",
        ));
        let v = verifier(&client, &templates, RunSettings::default());
        v.verify(&perf_table(), "c1", CLAIM).unwrap();

        let log = log.lock().unwrap();
        assert_eq!(log.len(), 9);
        for request in log.iter() {
            assert!(matches!(request.messages[0].role, crate::client::Role::System));
            assert!(matches!(request.messages[1].role, crate::client::Role::User));
        }

        // Grounding for step 2 names only its own subplan and index.
        let cell2 = &log[5];
        assert!(user_text(cell2).contains("verify part 2"));
        assert!(!user_text(cell2).contains("verify part 1"));
        assert!(cell2.messages[0].content.contains("the 2 step of the plan: [Plan 2]"));

        // Reasoning sees table, claim, subplan, grounding — never recaps.
        let reason2 = &log[6];
        assert!(user_text(reason2).contains("verify part 2"));
        assert!(user_text(reason2).contains("Counting from the first row for part 2"));
        assert!(!user_text(reason2).contains("Step 1 done"));
        assert!(!user_text(reason2).contains("verify part 1"));

        // The recap sees the whole plan.
        let recap2 = &log[7];
        assert!(user_text(recap2).contains("[Plan 1 Start]verify part 1 [Plan 1 End]"));
        assert!(user_text(recap2).contains("[Plan 2 Start]verify part 2 [Plan 2 End]"));
        assert!(user_text(recap2).contains("Numerical analysis for part 2"));
        // By default only the current reasoning feeds the recap.
        assert!(!user_text(recap2).contains("Step 1 done"));

        // The conclusion carries the plan and every reasoning/transition.
        let conclusion = &log[8];
        assert!(user_text(conclusion).contains("[Plan 2 Start]"));
        assert!(user_text(conclusion).contains("Numerical analysis for part 1"));
        assert!(user_text(conclusion).contains("Step 1 done"));
        assert!(user_text(conclusion).contains("Step 2 done"));
    }

    #[test]
    fn prior_recaps_feed_the_recap_prompt_when_enabled() {
        let templates = TemplateSet::default_bundle();
        let (client, log) = recording_client(chain_script(
            2,
            &["True", "True"],
            "<conclusion>Verified.</conclusion> <flag>True</flag>",
        ));
        let mut settings = RunSettings::default();
        settings.include_prior_recaps = true;
        let v = verifier(&client, &templates, settings);
        v.verify(&perf_table(), "c1", CLAIM).unwrap();

        let log = log.lock().unwrap();
        let recap2 = &log[7];
        assert!(user_text(recap2).contains("Step 1 done"));
        // Reasoning-stage locality is unaffected by the toggle.
        let reason2 = &log[6];
        assert!(!user_text(reason2).contains("Step 1 done"));
    }

    #[test]
    fn retries_and_paths_derive_distinct_seeds() {
        let templates = TemplateSet::default_bundle();
        let script = ScriptedBackend::new(
            chain_script(1, &["True"], "<conclusion>Verified.</conclusion> <flag>True</flag>"),
            "UNSCRIPTED",
        );
        let log = Arc::new(Mutex::new(Vec::new()));
        let backend = RecordingBackend { inner: script, log: log.clone() };
        let client = LlmClient::new(Box::new(backend)).with_backoff_base(Duration::ZERO);
        let mut settings = RunSettings::default();
        settings.seed = Some(7);
        let v = verifier(&client, &templates, settings);
        let result = v.multipath_verify(&perf_table(), "c1", CLAIM, 3).unwrap();

        assert_eq!(result.agreed_label, Some(Verdict::Support));
        assert!(!result.needs_adjudication);
        assert_eq!(result.records.len(), 3);
        let log = log.lock().unwrap();
        let interpret_seeds: BTreeSet<Option<u64>> = log
            .iter()
            .filter(|r| user_text(r).contains("### Your Interpretation of Claim"))
            .map(|r| r.seed)
            .collect();
        assert_eq!(
            interpret_seeds,
            BTreeSet::from([Some(7), Some(7 + (1u64 << 32)), Some(7 + (2u64 << 32))])
        );
    }

    #[test]
    fn multipath_rejects_even_or_zero_path_counts() {
        let templates = TemplateSet::default_bundle();
        let client = client_for(Vec::new());
        let v = verifier(&client, &templates, RunSettings::default());
        assert!(matches!(
            v.multipath_verify(&perf_table(), "c1", CLAIM, 2),
            Err(OrchestratorError::BadPathCount { k: 2 })
        ));
        assert!(matches!(
            v.multipath_verify(&perf_table(), "c1", CLAIM, 0),
            Err(OrchestratorError::BadPathCount { k: 0 })
        ));
    }

    #[test]
    fn majority_votes_match_the_spec_examples() {
        use Verdict::*;
        assert_eq!(majority_label(&[Refute, Refute, Support]), Some(Refute));
        assert_eq!(majority_label(&[Support, Refute, NotEnoughInfo]), None);
        assert_eq!(majority_label(&[Support]), Some(Support));
        assert_eq!(majority_label(&[NotEnoughInfo, NotEnoughInfo, Refute]), Some(NotEnoughInfo));
        assert_eq!(majority_label(&[]), None);
    }

    #[test]
    fn short_thought_is_one_call_with_a_minimal_trace() {
        let templates = TemplateSet::default_bundle();
        let client = client_for(vec![rule(
            &["### Your Verdict"],
            "<conclusion>The reversal in test perplexity refutes it.</conclusion> <flag>False</flag>",
        )]);
        let v = verifier(&client, &templates, RunSettings::default());
        let record = v.short_thought_verify(&perf_table(), "c1", CLAIM).unwrap();

        assert_eq!(record.label, Verdict::Refute);
        assert_eq!(record.trace.termination, Some(Termination::Completed));
        assert!(record.trace.plan.is_none());
        assert!(record.trace.steps.is_empty());
        assert_eq!(record.trace.usage[SHORT_THOUGHT_STAGE].calls, 1);
        assert_eq!(record.attempts[SHORT_THOUGHT_STAGE], 1);
        assert!(crate::chain::validate_trace(&record.trace).is_empty());
    }

    #[test]
    fn short_thought_without_a_flag_aborts() {
        let templates = TemplateSet::default_bundle();
        let client = client_for(vec![rule(&["### Your Verdict"], "no verdict markup here")]);
        let mut settings = RunSettings::default();
        settings.stage_retries = 1;
        let v = verifier(&client, &templates, settings);
        let record = v.short_thought_verify(&perf_table(), "c1", CLAIM).unwrap();
        assert_eq!(record.label, Verdict::NotEnoughInfo);
        assert_eq!(
            record.trace.termination,
            Some(Termination::Aborted {
                reason: AbortReason::RetriesExhausted { stage: SHORT_THOUGHT_STAGE.to_string() }
            })
        );
        assert_eq!(record.attempts[SHORT_THOUGHT_STAGE], 2);
    }

    fn batch_items(n: usize) -> Vec<BatchItem> {
        (1..=n)
            .map(|i| BatchItem {
                id: format!("c{i}"),
                domain: if i % 2 == 1 { "ml".to_string() } else { "finance".to_string() },
                table: perf_table(),
                claim: CLAIM.to_string(),
                gold: match i {
                    1..=3 => Some(true),
                    4 => Some(false),
                    5 => None,
                    _ => Some(true),
                },
            })
            .collect()
    }

    fn support_script() -> Vec<ScriptRule> {
        chain_script(1, &["True"], "<conclusion>Verified.</conclusion> <flag>True</flag>")
    }

    #[test]
    fn batch_persists_in_dataset_order_with_domain_tallies() {
        let templates = TemplateSet::default_bundle();
        let client = client_for(support_script());
        let v = verifier(&client, &templates, RunSettings::default());
        let items = batch_items(6);
        let mut persisted: Vec<String> = Vec::new();
        let summary = v
            .batch_verify(&items, &BTreeSet::new(), &BatchOptions::default(), &mut |record| {
                persisted.push(record.claim_id.clone());
                Ok(())
            })
            .unwrap();

        assert_eq!(persisted, vec!["c1", "c2", "c3", "c4", "c5", "c6"]);
        assert_eq!(summary.total, 6);
        assert_eq!(summary.computed, 6);
        assert_eq!(summary.skipped, 0);
        assert_eq!(summary.failed, 0);
        // Odd ids are ml: c1, c3, c5 — gold true, true, none. All SUPPORT.
        let ml = &summary.domains["ml"];
        assert_eq!((ml.records, ml.support, ml.with_gold, ml.scored, ml.correct), (3, 3, 2, 2, 2));
        // Even ids are finance: c2 (gold true), c4 (gold false), c6 (gold true).
        let fin = &summary.domains["finance"];
        assert_eq!((fin.records, fin.with_gold, fin.scored, fin.correct), (3, 3, 3, 2));
        assert_eq!(fin.accuracy(), Some(2.0 / 3.0));
    }

    #[test]
    fn batch_skips_already_persisted_ids() {
        let templates = TemplateSet::default_bundle();
        let client = client_for(support_script());
        let v = verifier(&client, &templates, RunSettings::default());
        let items = batch_items(6);
        let existing: BTreeSet<String> = ["c2".to_string(), "c4".to_string()].into();
        let mut persisted: Vec<String> = Vec::new();
        let summary = v
            .batch_verify(&items, &existing, &BatchOptions::default(), &mut |record| {
                persisted.push(record.claim_id.clone());
                Ok(())
            })
            .unwrap();

        assert_eq!(persisted, vec!["c1", "c3", "c5", "c6"]);
        assert_eq!(summary.computed, 4);
        assert_eq!(summary.skipped, 2);
    }

    #[test]
    fn batch_counts_failures_and_resumes_to_completion() {
        let templates = TemplateSet::default_bundle();
        let items = batch_items(4);

        // First run: the backend dies after 12 calls = two full chains.
        let dying = ScriptedBackend::new(support_script(), "UNSCRIPTED").with_fail_after(Some(12));
        let client = LlmClient::new(Box::new(dying)).with_backoff_base(Duration::ZERO);
        let v = verifier(&client, &templates, RunSettings::default());
        let mut store: Vec<String> = Vec::new();
        let options = BatchOptions { concurrency: 1, nei_policy: NeiPolicy::Wrong };
        let summary = v
            .batch_verify(&items, &BTreeSet::new(), &options, &mut |record| {
                store.push(record.claim_id.clone());
                Ok(())
            })
            .unwrap();
        assert_eq!(store, vec!["c1", "c2"]);
        assert_eq!(summary.computed, 2);
        assert_eq!(summary.failed, 2);
        assert_eq!(summary.failures.len(), 2);
        assert_eq!(summary.failures[0].id, "c3");

        // Resume with a healthy backend: only the missing ids run.
        let client = client_for(support_script());
        let v = verifier(&client, &templates, RunSettings::default());
        let existing: BTreeSet<String> = store.iter().cloned().collect();
        let summary = v
            .batch_verify(&items, &existing, &options, &mut |record| {
                store.push(record.claim_id.clone());
                Ok(())
            })
            .unwrap();
        assert_eq!(summary.computed, 2);
        assert_eq!(summary.skipped, 2);
        assert_eq!(summary.failed, 0);
        assert_eq!(store, vec!["c1", "c2", "c3", "c4"]);
    }

    #[test]
    fn empty_batch_yields_an_empty_summary() {
        let templates = TemplateSet::default_bundle();
        let client = client_for(Vec::new());
        let v = verifier(&client, &templates, RunSettings::default());
        let summary = v
            .batch_verify(&[], &BTreeSet::new(), &BatchOptions::default(), &mut |_| Ok(()))
            .unwrap();
        assert_eq!(summary, RunSummary::default());
    }

    #[test]
    fn nei_policy_changes_the_accuracy_denominator() {
        let templates = TemplateSet::default_bundle();
        // Chain concludes NOT_ENOUGH_INFO for every claim.
        let client = client_for(chain_script(
            1,
            &["Not enough information"],
            "<conclusion>Cannot settle it.</conclusion> <flag>Not enough information</flag>",
        ));
        let v = verifier(&client, &templates, RunSettings::default());
        let items = vec![BatchItem {
            id: "c1".to_string(),
            domain: "medical".to_string(),
            table: perf_table(),
            claim: CLAIM.to_string(),
            gold: Some(true),
        }];

        let wrong = v
            .batch_verify(
                &items,
                &BTreeSet::new(),
                &BatchOptions { concurrency: 1, nei_policy: NeiPolicy::Wrong },
                &mut |_| Ok(()),
            )
            .unwrap();
        let tally = &wrong.domains["medical"];
        assert_eq!((tally.scored, tally.correct), (1, 0));
        assert_eq!(tally.accuracy(), Some(0.0));

        let excluded = v
            .batch_verify(
                &items,
                &BTreeSet::new(),
                &BatchOptions { concurrency: 1, nei_policy: NeiPolicy::Excluded },
                &mut |_| Ok(()),
            )
            .unwrap();
        let tally = &excluded.domains["medical"];
        assert_eq!((tally.scored, tally.correct), (0, 0));
        assert_eq!(tally.accuracy(), None);
    }

    #[test]
    fn persist_errors_abort_but_keep_prior_records() {
        let templates = TemplateSet::default_bundle();
        let client = client_for(support_script());
        let v = verifier(&client, &templates, RunSettings::default());
        let items = batch_items(3);
        let mut persisted: Vec<String> = Vec::new();
        let result = v.batch_verify(
            &items,
            &BTreeSet::new(),
            &BatchOptions { concurrency: 1, nei_policy: NeiPolicy::Wrong },
            &mut |record| {
                if record.claim_id == "c2" {
                    return Err(std::io::Error::other("disk full"));
                }
                persisted.push(record.claim_id.clone());
                Ok(())
            },
        );
        assert!(matches!(result, Err(OrchestratorError::Persist { ref id, .. }) if id == "c2"));
        assert_eq!(persisted, vec!["c1"]);
    }

    #[test]
    fn records_serialize_round_trip() {
        let templates = TemplateSet::default_bundle();
        let client = client_for(support_script());
        let v = verifier(&client, &templates, RunSettings::default());
        let record = v.verify(&perf_table(), "c1", CLAIM).unwrap();
        let json = serde_json::to_string(&record).unwrap();
        let back: VerificationRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, record);
        assert!(json.contains(RECORD_SCHEMA));
    }
}
