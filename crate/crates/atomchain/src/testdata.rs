//! Fixtures shared across unit tests: a language-model scoreboard, a
//! materials-science water-uptake table (with one text cell), and a
//! script builder that answers every stage of a verification chain.

use crate::client::ScriptRule;
use crate::table::Table;

pub(crate) const PERF_TABLE: &str = "\
| performance | dev perp | dev acc | dev wer | test perp | test acc | test wer |
| Spanish-only-LM | 5.2 | 61.2 | 38.1 | 5.4 | 60.8 | 38.6 |
| English-only-LM | 4.9 | 62.0 | 37.5 | 5.1 | 61.4 | 37.9 |
| All:CS-last-LM | 3.8 | 64.7 | 35.2 | 4.0 | 64.1 | 35.7 |
| All:Shuffled-LM | 3.6 | 65.3 | 34.8 | 3.8 | 64.9 | 35.1 |
| CS-only-LM | 2.1 | 68.4 | 32.0 | 2.3 | 67.9 | 32.4 |
| CS-only+vocab-LM | 1.9 | 69.1 | 31.2 | 2.0 | 68.6 | 31.6 |
| Fine-Tuned-LM | 1.6 | 70.2 | 30.1 | 1.7 | 69.8 | 30.5 |
| CS-only-disc | 1.2 | 71.0 | 29.4 | 1.3 | 70.5 | 29.8 |
| Fine-Tuned-disc | 2.6 | 72.3 | 28.1 | 2.8 | 71.9 | 28.4 |";

pub(crate) const WATER_TABLE: &str = "\
| material | Freezable water (mg/g) | Non-frozen water (mg/g) | Total water (mg/g) |
| XLPE | CellTag | 0.4 | 0.4 |
| 5 wt% VS | 1.1 | 2.6 | 3.7 |
| 12.5 wt% VS | [BOLD] 5.3 | [BOLD] 7.7 | [BOLD] 13.0 |";

pub(crate) fn perf_table() -> Table {
    let (table, _) = Table::parse("performance", PERF_TABLE).unwrap();
    table
}

pub(crate) fn water_table() -> Table {
    let (table, _) = Table::parse("water content", WATER_TABLE).unwrap();
    table
}

pub(crate) fn rule(needles: &[&str], response: &str) -> ScriptRule {
    ScriptRule {
        needles: needles.iter().map(|s| s.to_string()).collect(),
        response: response.to_string(),
    }
}

pub(crate) fn grounding_response(k: usize) -> String {
    format!(
        "<grounding>\nCounting from the first row for part {k}: the value is '1.3'.\n</grounding>\n\n\
         <extraction>\nThe 'test perp' value for the 'CS-only-disc' model is 1.3.\n</extraction>"
    )
}

/// Script for an n-plan chain. `marker` is an extra needle added to every
/// rule (pass "" to match any claim), `flags[k]` is the recap flag markup
/// for step k+1 (empty string = no flag), `conclusion` the final response.
pub(crate) fn chain_script(
    marker: &str,
    plans: usize,
    flags: &[&str],
    conclusion: &str,
) -> Vec<ScriptRule> {
    let mk = |needles: &[&str], response: &str| -> ScriptRule {
        let mut all: Vec<&str> = needles.to_vec();
        if !marker.is_empty() {
            all.push(marker);
        }
        rule(&all, response)
    };
    let mut rules =
        vec![mk(&["### Your Interpretation of Claim"], "The claim compares two models.")];
    let plan_text: Vec<String> = (1..=plans)
        .map(|i| format!("[Plan {i} Start]verify part {i} [Plan {i} End]"))
        .collect();
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
