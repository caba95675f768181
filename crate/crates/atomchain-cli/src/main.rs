//! `atomchain`: batch workbench for staged table-claim verification.
//!
//! Subcommands: verify (one claim), batch (a dataset, resumable),
//! claimgen (claim-pair generation), evaluate (chain-quality metrics),
//! report (per-domain accuracy and dataset composition), oracle-check
//! (deterministic check expressions against a table).

mod config;
mod dataset;
mod store;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use atomchain::chain::Verdict;
use atomchain::claimgen::{AdjudicationEntry, ClaimFactory, NegativeMethod, PairOutcome};
use atomchain::metrics::{
    alignment_check, ingest_human_scores, label_accuracy, step_accuracy, trace_redundancy,
    HumanScoreIngest, LabelRow, ModelJudge, StepJudgment,
};
use atomchain::oracle::{eval, parse_check, OracleValue, OracleVerdict};
use atomchain::orchestrator::{BatchOptions, DomainTally, RunSummary, VerificationRecord, Verifier};
use atomchain::table::Table;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use config::{Overrides, RunConfig};
use dataset::{DatasetEntry, Domain, GoldLabel, Provenance};
use store::JsonlStore;

#[derive(Parser)]
#[command(
    name = "atomchain",
    version,
    about = "Staged skill-chain verification of scientific table claims"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Verify one claim against one table.
    Verify {
        /// Table file: caption plus pipe-delimited rows, or JSON
        /// {"caption", "rows"}.
        table: PathBuf,
        /// The claim to verify.
        claim: String,
        /// Identifier stored with the trace.
        #[arg(long, default_value = "claim-1")]
        claim_id: String,
        /// Record store the trace is appended to.
        #[arg(long, default_value = "traces.jsonl")]
        out: PathBuf,
        /// Print the trace document as JSON instead of the summary line.
        #[arg(long)]
        json: bool,
    },
    /// Run every claim in a dataset, resuming past completed ids.
    Batch {
        /// Dataset JSONL file.
        dataset: PathBuf,
        /// Record store (default: dataset path with .records.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the run summary as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Generate supported/refuted claim pairs for a table.
    Claimgen {
        /// Table file.
        table: PathBuf,
        /// How negatives are produced.
        #[arg(long, value_enum, default_value_t = NegativesArg::Flip)]
        negatives: NegativesArg,
        /// Dataset file the pairs are written to.
        #[arg(long, default_value = "pairs.jsonl")]
        out: PathBuf,
        /// Domain recorded on the emitted entries.
        #[arg(long, value_enum, default_value_t = Domain::Other)]
        domain: Domain,
        /// Emit pairs without label validation.
        #[arg(long)]
        skip_validation: bool,
        /// Store for pairs whose validation disagreed (default: out
        /// path with .adjudication.jsonl).
        #[arg(long)]
        adjudications: Option<PathBuf>,
    },
    /// Compute chain-quality metrics over stored traces.
    Evaluate {
        /// Record store to evaluate.
        records: PathBuf,
        /// Step-judgment JSONL ({"trace_id", "step", "verdict", "judge"}).
        #[arg(long)]
        judgments: Option<PathBuf>,
        /// Human score CSV (trace_id, annotator_id, granularity,
        /// interpretability).
        #[arg(long)]
        human_scores: Option<PathBuf>,
        /// Probe redundancy and alignment with the model as judge.
        #[arg(long)]
        probe: bool,
        /// Print one JSON row per trace.
        #[arg(long)]
        json: bool,
    },
    /// Dataset composition and per-domain accuracy for a run.
    Report {
        /// Record store produced by batch.
        records: PathBuf,
        /// Dataset the records were computed from.
        #[arg(long)]
        dataset: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Evaluate check expressions against a table.
    #[command(name = "oracle-check")]
    OracleCheck {
        /// Table file.
        table: PathBuf,
        /// One check expression, e.g. "(~= (sum (row 4 2 3)) 13.0)".
        check: Option<String>,
        /// File of check expressions, one per line.
        #[arg(long)]
        batch: Option<PathBuf>,
        /// Print one JSON result per check.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NegativesArg {
    /// Minimal meaning-reversing edit of the positive claim.
    Flip,
    /// Alter one quantitative element so the table contradicts it.
    Manipulate,
}

impl From<NegativesArg> for NegativeMethod {
    fn from(arg: NegativesArg) -> NegativeMethod {
        match arg {
            NegativesArg::Flip => NegativeMethod::SemanticFlip,
            NegativesArg::Manipulate => NegativeMethod::DataManipulation,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = RunConfig::load(&cli.overrides)?;
    match cli.command {
        Command::Verify { table, claim, claim_id, out, json } => {
            cmd_verify(&config, &table, &claim, &claim_id, &out, json)
        }
        Command::Batch { dataset, out, json } => cmd_batch(&config, &dataset, out, json),
        Command::Claimgen { table, negatives, out, domain, skip_validation, adjudications } => {
            cmd_claimgen(&config, &table, negatives, &out, domain, skip_validation, adjudications)
        }
        Command::Evaluate { records, judgments, human_scores, probe, json } => {
            cmd_evaluate(&config, &records, judgments, human_scores, probe, json)
        }
        Command::Report { records, dataset, json } => cmd_report(&config, &records, &dataset, json),
        Command::OracleCheck { table, check, batch, json } => {
            cmd_oracle_check(&table, check, batch, json)
        }
    }
}

/// JSON table form accepted by table-file arguments.
#[derive(Deserialize)]
struct TableJson {
    caption: String,
    rows: Vec<Vec<String>>,
}

/// Loads a table file. JSON objects use {"caption", "rows"}; text files
/// put caption lines first, then pipe-delimited rows.
fn load_table_file(path: &Path) -> Result<Table> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading table {}", path.display()))?;
    if text.trim_start().starts_with('{') {
        let parsed: TableJson = serde_json::from_str(&text)
            .with_context(|| format!("parsing JSON table {}", path.display()))?;
        return Table::from_rows(&parsed.caption, &parsed.rows, 1)
            .with_context(|| format!("building table {}", path.display()));
    }
    let mut caption_lines = Vec::new();
    for line in text.lines() {
        if line.contains('|') {
            break;
        }
        if !line.trim().is_empty() {
            caption_lines.push(line.trim());
        }
    }
    let caption = caption_lines.join(" ");
    let (table, warnings) = Table::parse(&caption, &text)
        .with_context(|| format!("parsing table {}", path.display()))?;
    for warning in warnings {
        eprintln!("warning: {}: {warning}", path.display());
    }
    Ok(table)
}

fn verdict_exit(label: Verdict) -> ExitCode {
    match label {
        Verdict::Support | Verdict::Refute => ExitCode::SUCCESS,
        Verdict::NotEnoughInfo => ExitCode::from(2),
    }
}

fn cmd_verify(
    config: &RunConfig,
    table_path: &Path,
    claim: &str,
    claim_id: &str,
    out: &Path,
    json: bool,
) -> Result<ExitCode> {
    let table = load_table_file(table_path)?;
    let client = config.build_client()?;
    let templates = config.template_set()?;
    let verifier = Verifier::new(&client, &templates, config.run_settings());
    let record = verifier.verify(&table, claim_id, claim)?;
    JsonlStore::records(out).append(&record)?;
    if json {
        println!("{}", serde_json::to_string(&record.trace)?);
    } else {
        println!("{}", record.label);
        println!("trace: {}", out.display());
    }
    Ok(verdict_exit(record.label))
}

fn render_batch_summary(summary: &RunSummary) -> String {
    let mut out = format!(
        "total {}  computed {}  skipped {}  failed {}\n",
        summary.total, summary.computed, summary.skipped, summary.failed
    );
    if !summary.domains.is_empty() {
        out.push_str("domain        records  scored  correct  accuracy\n");
        let mut row = |name: &str, tally: &DomainTally| {
            let accuracy =
                tally.accuracy().map(|a| format!("{a:.3}")).unwrap_or_else(|| "-".to_string());
            out.push_str(&format!(
                "{name:<13} {records:>7}  {scored:>6}  {correct:>7}  {accuracy:>8}\n",
                records = tally.records,
                scored = tally.scored,
                correct = tally.correct,
            ));
        };
        for (domain, tally) in &summary.domains {
            row(domain, tally);
        }
    }
    for failure in &summary.failures {
        out.push_str(&format!("failed {}: {}\n", failure.id, failure.error));
    }
    out
}

fn cmd_batch(
    config: &RunConfig,
    dataset_path: &Path,
    out: Option<PathBuf>,
    json: bool,
) -> Result<ExitCode> {
    let entries = dataset::load_dataset(dataset_path)?;
    let items = dataset::batch_items(&entries)?;
    let out = out.unwrap_or_else(|| dataset_path.with_extension("records.jsonl"));
    let record_store = JsonlStore::records(&out);
    let existing = record_store.existing_ids()?;
    let client = config.build_client()?;
    let templates = config.template_set()?;
    let verifier = Verifier::new(&client, &templates, config.run_settings());
    let options =
        BatchOptions { concurrency: config.concurrency, nei_policy: config.nei_policy };
    let mut appender = record_store.appender()?;
    let summary =
        verifier.batch_verify(&items, &existing, &options, &mut |record| appender.append(record))?;
    if json {
        println!("{}", serde_json::to_string(&summary)?);
    } else {
        print!("{}", render_batch_summary(&summary));
        println!("records: {}", out.display());
    }
    Ok(if summary.failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_claimgen(
    config: &RunConfig,
    table_path: &Path,
    negatives: NegativesArg,
    out: &Path,
    domain: Domain,
    skip_validation: bool,
    adjudications: Option<PathBuf>,
) -> Result<ExitCode> {
    let table = load_table_file(table_path)?;
    let client = config.build_client()?;
    let templates = config.template_set()?;
    let factory =
        ClaimFactory::new(&client, &templates, config.run_settings(), config.factory_settings());
    let pairs = factory.generate_pairs(&table, negatives.into())?;

    let stem = table_path.file_stem().and_then(|s| s.to_str()).unwrap_or("table");
    let adjudication_path =
        adjudications.unwrap_or_else(|| out.with_extension("adjudication.jsonl"));
    let mut entries = Vec::new();
    let mut adjudicated = 0usize;
    let mut emitted = 0usize;
    for (i, pair) in pairs.into_iter().enumerate() {
        let outcome = if skip_validation {
            PairOutcome::Validated(pair)
        } else {
            factory.validate_pair(&table, pair)?
        };
        match outcome {
            PairOutcome::Validated(pair) => {
                emitted += 1;
                let n = i + 1;
                let mut positive = DatasetEntry::new(
                    format!("{stem}-p{n}"),
                    domain,
                    &table,
                    &pair.positive,
                    GoldLabel::Support,
                    Provenance::Generated,
                );
                positive.check = pair.positive_check.clone();
                let mut negative = DatasetEntry::new(
                    format!("{stem}-n{n}"),
                    domain,
                    &table,
                    &pair.negative,
                    GoldLabel::Refute,
                    Provenance::Generated,
                );
                negative.check = pair.negative_check.clone();
                entries.push(positive);
                entries.push(negative);
            }
            PairOutcome::NeedsAdjudication { pair, problems } => {
                adjudicated += 1;
                store::append_adjudication(
                    &adjudication_path,
                    &AdjudicationEntry::new(pair, problems),
                )?;
            }
        }
    }
    dataset::save_dataset(out, &entries)?;
    println!("pairs: {emitted} ({} entries) -> {}", entries.len(), out.display());
    if adjudicated > 0 {
        println!("adjudication: {adjudicated} -> {}", adjudication_path.display());
    }
    Ok(ExitCode::SUCCESS)
}

/// Judgment file line: a step judgment plus the trace it belongs to.
#[derive(Debug, Serialize, Deserialize)]
struct JudgmentLine {
    trace_id: String,
    #[serde(flatten)]
    judgment: StepJudgment,
}

fn load_judgments(path: &Path) -> Result<BTreeMap<String, Vec<StepJudgment>>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading judgments {}", path.display()))?;
    let mut map: BTreeMap<String, Vec<StepJudgment>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JudgmentLine = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        map.entry(parsed.trace_id).or_default().push(parsed.judgment);
    }
    Ok(map)
}

/// One evaluated trace; absent fields were not requested or not
/// available for it.
#[derive(Debug, Serialize)]
struct EvaluateRow {
    trace_id: String,
    steps: usize,
    label: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    redundancy_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alignment_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    granularity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    interpretability: Option<f64>,
}

fn cmd_evaluate(
    config: &RunConfig,
    records_path: &Path,
    judgments: Option<PathBuf>,
    human_scores: Option<PathBuf>,
    probe: bool,
    json: bool,
) -> Result<ExitCode> {
    let records: Vec<VerificationRecord> = JsonlStore::records(records_path).load()?;
    let judgments = judgments.map(|path| load_judgments(&path)).transpose()?.unwrap_or_default();
    let human: Option<HumanScoreIngest> = human_scores
        .map(|path| -> Result<HumanScoreIngest> {
            let file = fs::File::open(&path)
                .with_context(|| format!("reading human scores {}", path.display()))?;
            Ok(ingest_human_scores(file)?)
        })
        .transpose()?;
    if let Some(ingest) = &human {
        for warning in &ingest.warnings {
            eprintln!("warning: {warning}");
        }
    }

    let client = if probe { Some(config.build_client()?) } else { None };
    let mut rows = Vec::new();
    for record in &records {
        let steps = record.trace.steps.len();
        let accuracy = judgments
            .get(&record.claim_id)
            .map(|trace_judgments| step_accuracy(steps, trace_judgments))
            .transpose()
            .with_context(|| format!("trace {}", record.claim_id))?;
        let (redundancy_rate, alignment_rate) = match &client {
            Some(client) => {
                let judge = ModelJudge::new(client, config.run_settings());
                (
                    Some(trace_redundancy(&record.trace.steps, &judge)?),
                    Some(alignment_check(&record.trace.steps, &judge)?),
                )
            }
            None => (None, None),
        };
        let scores = human.as_ref().and_then(|ingest| ingest.by_trace.get(&record.claim_id));
        rows.push(EvaluateRow {
            trace_id: record.claim_id.clone(),
            steps,
            label: record.label,
            accuracy,
            redundancy_rate,
            alignment_rate,
            granularity: scores.map(|s| s.granularity),
            interpretability: scores.map(|s| s.interpretability),
        });
    }

    if json {
        for row in &rows {
            println!("{}", serde_json::to_string(row)?);
        }
    } else {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        println!("trace         steps  label            acc    redun  align  gran   interp");
        for row in &rows {
            println!(
                "{:<13} {:>5}  {:<15} {:>6} {:>6} {:>6} {:>6} {:>6}",
                row.trace_id,
                row.steps,
                row.label.to_string(),
                cell(row.accuracy),
                cell(row.redundancy_rate),
                cell(row.alignment_rate),
                cell(row.granularity),
                cell(row.interpretability),
            );
        }
        let judged: Vec<f64> = rows.iter().filter_map(|row| row.accuracy).collect();
        if !judged.is_empty() {
            let mean = judged.iter().sum::<f64>() / judged.len() as f64;
            println!("mean accuracy {:.3} over {} judged trace(s)", mean, judged.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Per-domain dataset composition (Table 3-style counts).
#[derive(Debug, Default, Serialize)]
struct DomainComposition {
    entries: u64,
    positive: u64,
    negative: u64,
}

#[derive(Debug, Serialize)]
struct Report {
    composition: BTreeMap<String, DomainComposition>,
    accuracy: atomchain::metrics::AccuracyTable,
    predicted: usize,
    dataset_entries: usize,
}

fn cmd_report(
    config: &RunConfig,
    records_path: &Path,
    dataset_path: &Path,
    json: bool,
) -> Result<ExitCode> {
    let entries = dataset::load_dataset(dataset_path)?;
    let mut composition: BTreeMap<String, DomainComposition> = BTreeMap::new();
    let mut by_id: BTreeMap<&str, &DatasetEntry> = BTreeMap::new();
    for entry in &entries {
        let slot = composition.entry(entry.domain.to_string()).or_default();
        slot.entries += 1;
        match entry.label {
            GoldLabel::Support => slot.positive += 1,
            GoldLabel::Refute => slot.negative += 1,
        }
        by_id.insert(&entry.id, entry);
    }

    let records: Vec<VerificationRecord> = JsonlStore::records(records_path).load()?;
    let rows: Vec<LabelRow> = records
        .iter()
        .map(|record| {
            let entry = by_id.get(record.claim_id.as_str()).with_context(|| {
                format!("record {} is not in the dataset", record.claim_id)
            })?;
            Ok(LabelRow {
                id: record.claim_id.clone(),
                domain: entry.domain.to_string(),
                label: record.label,
                gold: Some(entry.label.as_bool()),
            })
        })
        .collect::<Result<_>>()?;
    let accuracy = label_accuracy(&rows, config.nei_policy)?;

    let report = Report {
        composition,
        accuracy,
        predicted: records.len(),
        dataset_entries: entries.len(),
    };
    if json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        println!("domain        entries  positive  negative");
        for (domain, slot) in &report.composition {
            println!(
                "{domain:<13} {:>7}  {:>8}  {:>8}",
                slot.entries, slot.positive, slot.negative
            );
        }
        println!();
        print!("{}", report.accuracy.render_text());
        println!(
            "predicted {} of {} dataset entr{}",
            report.predicted,
            report.dataset_entries,
            if report.dataset_entries == 1 { "y" } else { "ies" }
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn render_oracle_value(value: &OracleValue) -> String {
    match value {
        OracleValue::Bool(true) => "TRUE".to_string(),
        OracleValue::Bool(false) => "FALSE".to_string(),
        OracleValue::Number { value, unit } => match unit {
            Some(unit) => format!("{value} {unit}"),
            None => value.to_string(),
        },
    }
}

fn render_oracle_verdict(name: &str, verdict: &OracleVerdict) -> String {
    let mut out = format!("{name}: {}\n", render_oracle_value(&verdict.value));
    if !verdict.evidence.is_empty() {
        let cells: Vec<String> = verdict
            .evidence
            .iter()
            .map(|(address, value)| format!("({},{})={}", address.row, address.col, value))
            .collect();
        out.push_str(&format!("  evidence: {}\n", cells.join(" ")));
    }
    if let Some(note) = &verdict.precision_note {
        out.push_str(&format!("  note: {note}\n"));
    }
    out
}

#[derive(Serialize)]
struct OracleCheckRow<'a> {
    check: &'a str,
    verdict: &'a OracleVerdict,
}

fn cmd_oracle_check(
    table_path: &Path,
    check: Option<String>,
    batch: Option<PathBuf>,
    json: bool,
) -> Result<ExitCode> {
    let table = load_table_file(table_path)?;
    let checks: Vec<(String, String)> = match (check, batch) {
        (Some(text), None) => vec![("check-1".to_string(), text)],
        (None, Some(path)) => {
            let content = fs::read_to_string(&path)
                .with_context(|| format!("reading checks {}", path.display()))?;
            content
                .lines()
                .enumerate()
                .filter(|(_, line)| {
                    let line = line.trim();
                    !line.is_empty() && !line.starts_with('#')
                })
                .map(|(i, line)| (format!("check-{}", i + 1), line.trim().to_string()))
                .collect()
        }
        (Some(_), Some(_)) => bail!("give either one check or --batch, not both"),
        (None, None) => bail!("give a check expression or --batch FILE"),
    };

    let mut failures = 0usize;
    for (name, text) in &checks {
        let result = parse_check(text).and_then(|expr| eval(&expr, &table));
        match result {
            Ok(verdict) => {
                if json {
                    println!(
                        "{}",
                        serde_json::to_string(&OracleCheckRow { check: text, verdict: &verdict })?
                    );
                } else {
                    print!("{}", render_oracle_verdict(name, &verdict));
                }
            }
            Err(err) => {
                failures += 1;
                eprintln!("{name}: {err}");
            }
        }
    }
    Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
