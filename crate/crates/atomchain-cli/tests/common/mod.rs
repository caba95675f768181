//! Helpers shared by the CLI integration tests: a pipe-table fixture,
//! script-file builders for the mock backend, and dataset writers.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::{json, Value};

pub const SCRIPT_SCHEMA: &str = "atomchain.script.v1";
pub const DATASET_SCHEMA: &str = "atomchain.dataset.v1";

/// Materials-science water-uptake table (one text cell, bold markup).
pub const WATER_TABLE: &str = "\
| material | Freezable water (mg/g) | Non-frozen water (mg/g) | Total water (mg/g) |
| XLPE | CellTag | 0.4 | 0.4 |
| 5 wt% VS | 1.1 | 2.6 | 3.7 |
| 12.5 wt% VS | [BOLD] 5.3 | [BOLD] 7.7 | [BOLD] 13.0 |";

pub const WATER_CAPTION: &str = "water content";

/// The command under test, with any ambient configuration scrubbed.
pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_atomchain"));
    for (key, _) in std::env::vars() {
        if key.starts_with("ATOMCHAIN_") {
            cmd.env_remove(key);
        }
    }
    cmd
}

pub fn write_water_table(dir: &Path) -> PathBuf {
    let path = dir.join("water.txt");
    fs::write(&path, format!("{WATER_CAPTION}\n{WATER_TABLE}\n")).unwrap();
    path
}

pub fn water_rows() -> Vec<Vec<String>> {
    WATER_TABLE
        .lines()
        .map(|line| {
            line.trim()
                .trim_start_matches('|')
                .trim_end_matches('|')
                .split('|')
                .map(|cell| cell.trim().to_string())
                .collect()
        })
        .collect()
}

pub fn script_rule(needles: &[&str], response: &str) -> Value {
    json!({"schema": SCRIPT_SCHEMA, "needles": needles, "response": response})
}

pub fn script_default(response: &str) -> Value {
    json!({"schema": SCRIPT_SCHEMA, "default": response})
}

pub fn script_latency(ms: u64) -> Value {
    json!({"schema": SCRIPT_SCHEMA, "latency_ms": ms})
}

pub fn write_script(path: &Path, lines: &[Value]) {
    let text: String = lines.iter().map(|line| format!("{line}\n")).collect();
    fs::write(path, text).unwrap();
}

pub fn grounding_response(k: usize) -> String {
    format!(
        "<grounding>\nCounting from the first row for part {k}: the value is found.\n</grounding>\n\n\
         <extraction>\nThe relevant value for part {k} is 13.0.\n</extraction>"
    )
}

/// Script lines answering every stage of an n-plan chain. `marker` is an
/// extra needle on every rule (typically a token unique to one claim),
/// `flags[k]` the recap flag markup for step k+1 (empty = no flag), and
/// `conclusion` the final-stage response.
pub fn chain_rules(marker: &str, plans: usize, flags: &[&str], conclusion: &str) -> Vec<Value> {
    let mk = |needles: &[&str], response: &str| -> Value {
        let mut all: Vec<&str> = needles.to_vec();
        if !marker.is_empty() {
            all.push(marker);
        }
        script_rule(&all, response)
    };
    let mut rules =
        vec![mk(&["### Your Interpretation of Claim"], "The claim cites one table value.")];
    let plan_text: Vec<String> =
        (1..=plans).map(|i| format!("[Plan {i} Start]verify part {i} [Plan {i} End]")).collect();
    rules.push(mk(&["### Your Plan"], &plan_text.join("\n\n")));
    for (i, flag) in flags.iter().enumerate() {
        let k = i + 1;
        let part = format!("verify part {k}");
        rules.push(mk(&["### Your Grounding and Extraction", &part], &grounding_response(k)));
        rules.push(mk(
            &["### Your Reasoning", &part],
            &format!("Numerical analysis for part {k}: the values compare as claimed."),
        ));
        let recap = if flag.is_empty() {
            format!("Step {k} done; the data was inconclusive.")
        } else {
            format!("Step {k} done. <flag>{flag}</flag>")
        };
        rules.push(mk(&["### Your transition", &format!("analysis for part {k}")], &recap));
    }
    rules.push(mk(&["### Your Conclusion"], conclusion));
    rules
}

/// One dataset line over the water table.
pub fn dataset_line(id: &str, domain: &str, claim: &str, label: &str) -> Value {
    json!({
        "schema": DATASET_SCHEMA,
        "id": id,
        "domain": domain,
        "caption": WATER_CAPTION,
        "rows": water_rows(),
        "claim": claim,
        "label": label,
        "provenance": "IMPORTED",
    })
}

pub fn write_jsonl(path: &Path, lines: &[Value]) {
    let text: String = lines.iter().map(|line| format!("{line}\n")).collect();
    fs::write(path, text).unwrap();
}

pub fn read_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|line| !line.trim().is_empty())
        .map(|line| line.to_string())
        .collect()
}

pub fn stdout_str(output: &std::process::Output) -> String {
    String::from_utf8_lossy(&output.stdout).to_string()
}

pub fn stderr_str(output: &std::process::Output) -> String {
    String::from_utf8_lossy(&output.stderr).to_string()
}
