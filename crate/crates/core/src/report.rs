//! CSV, markdown and JSON renderings of an analysis.
//!
//! Every output carries the config digest and template checksum it was
//! computed from. Rows follow cell-key order, so identical inputs give
//! byte-identical files.

use crate::analysis::{
    CellMetrics, Dependent, DeviationReport, ExpectationVariant, RegressionResult, RegressionRow,
    RunAnalysis, FACTORS, SENTINEL,
};
use crate::orchestrator::{CellKey, Transcript};
use crate::profile::{Belief, ReasoningMethod};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("deviation csv is missing column `{0}`")]
    MissingColumn(String),
    #[error("deviation csv row {row}: bad value `{value}` in `{column}`")]
    BadValue {
        row: usize,
        column: String,
        value: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub run_id: String,
    pub config_digest: String,
    pub template_checksum: String,
    pub harness_version: String,
}

/// `1`, `2.9`, `4.25`
pub fn trim_number(x: f64) -> String {
    let s = format!("{x:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

fn ds_cell(x: f64) -> String {
    if x == SENTINEL {
        "-1".to_string()
    } else {
        format!("{x:.4}")
    }
}

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 csv")
}

fn key_fields(cell: &CellKey) -> [String; 6] {
    [
        cell.model.clone(),
        cell.reasoning_label(),
        cell.proposer_belief.label().to_string(),
        cell.responder_belief.label().to_string(),
        cell.proposer_reasoning.key().to_string(),
        cell.responder_reasoning.key().to_string(),
    ]
}

const KEY_COLUMNS: [&str; 6] = [
    "model",
    "reasoning",
    "proposer_belief",
    "responder_belief",
    "proposer_reasoning",
    "responder_reasoning",
];

pub fn metrics_csv(metrics: &[CellMetrics], prov: &Provenance) -> String {
    let mut w = writer();
    let mut header: Vec<&str> = KEY_COLUMNS.to_vec();
    header.extend([
        "ac",
        "avg_turns",
        "payout_proposer",
        "payout_responder",
        "accepted_games",
        "valid_games",
        "invalid_games",
        "retries",
        "config_digest",
        "template_checksum",
    ]);
    w.write_record(&header).expect("write");
    for m in metrics {
        let mut rec: Vec<String> = key_fields(&m.cell).to_vec();
        rec.extend([
            trim_number(m.ac),
            trim_number(m.avg_turns),
            m.payout_proposer.to_string(),
            m.payout_responder.to_string(),
            m.accepted_games.to_string(),
            m.valid_games.to_string(),
            m.invalid_games.to_string(),
            m.retries.to_string(),
            prov.config_digest.clone(),
            prov.template_checksum.clone(),
        ]);
        w.write_record(&rec).expect("write");
    }
    finish(w)
}

pub fn deviation_csv(reports: &[DeviationReport], prov: &Provenance) -> String {
    let mut w = writer();
    let mut header: Vec<&str> = KEY_COLUMNS.to_vec();
    header.extend([
        "variant",
        "P",
        "R_A",
        "R_R",
        "R_R_per_game",
        "p_samples",
        "r_a_samples",
        "r_r_samples",
        "r_r_games",
        "config_digest",
        "template_checksum",
    ]);
    w.write_record(&header).expect("write");
    for r in reports {
        let mut rec: Vec<String> = key_fields(&r.cell).to_vec();
        rec.extend([
            r.variant.key().to_string(),
            ds_cell(r.p),
            ds_cell(r.r_a),
            ds_cell(r.r_r),
            ds_cell(r.r_r_per_game),
            r.p_samples.to_string(),
            r.r_a_samples.to_string(),
            r.r_r_samples.to_string(),
            r.r_r_games.to_string(),
            prov.config_digest.clone(),
            prov.template_checksum.clone(),
        ]);
        w.write_record(&rec).expect("write");
    }
    finish(w)
}

/// Reads regression rows for `dependent` out of a deviation CSV, along with
/// the provenance recorded in it.
pub fn read_deviation_csv(
    text: &str,
    dependent: Dependent,
) -> Result<(Vec<RegressionRow>, Provenance), ReportError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ReportError::MissingColumn(name.to_string()))
    };
    let [model, reasoning, pb, rb] = [
        col("model")?,
        col("reasoning")?,
        col("proposer_belief")?,
        col("responder_belief")?,
    ];
    let value_col = col(dependent.label())?;
    let digest = col("config_digest").ok();
    let checksum = col("template_checksum").ok();
    let mut rows = Vec::new();
    let mut prov = Provenance::default();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let raw = &rec[value_col];
        let value: f64 = raw.trim().parse().map_err(|_| ReportError::BadValue {
            row: i + 2,
            column: dependent.label().to_string(),
            value: raw.to_string(),
        })?;
        if i == 0 {
            prov.config_digest = digest.map(|c| rec[c].to_string()).unwrap_or_default();
            prov.template_checksum = checksum.map(|c| rec[c].to_string()).unwrap_or_default();
        }
        rows.push(RegressionRow {
            value,
            model: rec[model].to_string(),
            reasoning: rec[reasoning].to_string(),
            proposer_belief: rec[pb].to_string(),
            responder_belief: rec[rb].to_string(),
        });
    }
    Ok((rows, prov))
}

fn provenance_lines(prov: &Provenance) -> String {
    format!(
        "config digest: `{}`  \ntemplate checksum: `{}`  \nharness: {}\n",
        prov.config_digest, prov.template_checksum, prov.harness_version
    )
}

/// Main results: one block per belief pair, one row per reasoning method,
/// and `AC | Avg. Turns | λ_P, λ_R | Invalid` per model.
pub fn main_results_markdown(metrics: &[CellMetrics], prov: &Provenance) -> String {
    let models: BTreeSet<&str> = metrics.iter().map(|m| m.cell.model.as_str()).collect();
    type Rows<'a> = BTreeMap<(ReasoningMethod, ReasoningMethod), BTreeMap<&'a str, &'a CellMetrics>>;
    let mut by_pair: BTreeMap<(Belief, Belief), Rows> = BTreeMap::new();
    for m in metrics {
        by_pair
            .entry((m.cell.proposer_belief, m.cell.responder_belief))
            .or_default()
            .entry((m.cell.proposer_reasoning, m.cell.responder_reasoning))
            .or_default()
            .insert(&m.cell.model, m);
    }
    let mut out = String::from("# Main results\n\n");
    out.push_str(&provenance_lines(prov));
    for ((pb, rb), rows) in &by_pair {
        let _ = write!(out, "\n## {pb}-{rb}\n\n| Reasoning |");
        for model in &models {
            let _ = write!(out, " {model} AC | Avg. Turns | λ_P, λ_R | Invalid |");
        }
        out.push_str("\n|---|");
        for _ in &models {
            out.push_str("---:|---:|---:|---:|");
        }
        out.push('\n');
        for (&(pr, rr), cells) in rows {
            let label = if pr == rr {
                pr.label().to_string()
            } else {
                format!("{}/{}", pr.label(), rr.label())
            };
            let _ = write!(out, "| {label} |");
            for model in &models {
                match cells.get(model) {
                    Some(m) => {
                        let _ = write!(
                            out,
                            " {} | {} | {:.1}, {:.1} | {} |",
                            trim_number(m.ac),
                            trim_number(m.avg_turns),
                            m.payout_proposer as f64,
                            m.payout_responder as f64,
                            m.invalid_games
                        );
                    }
                    None => out.push_str(" - | - | - | - |"),
                }
            }
            out.push('\n');
        }
    }
    out
}

pub fn deviation_markdown(reports: &[DeviationReport], variant: ExpectationVariant, prov: &Provenance) -> String {
    let mut out = format!("# Deviation scores ({variant})\n\n");
    out.push_str(&provenance_lines(prov));
    out.push_str("\nP and R_A: lower is better. R_R: higher is better; -1 means no samples.\n\n");
    out.push_str("| Model | Beliefs | Reasoning | P | R_A | R_R | R_R per game |\n|---|---|---|---:|---:|---:|---:|\n");
    for r in reports.iter().filter(|r| r.variant == variant) {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.cell.model,
            r.cell.belief_pair_label(),
            r.cell.reasoning_label(),
            ds_cell(r.p),
            ds_cell(r.r_a),
            ds_cell(r.r_r),
            ds_cell(r.r_r_per_game)
        );
    }
    out
}

/// Coefficient table with one column per fitted dependent variable.
pub fn regression_markdown(results: &[RegressionResult], prov: &Provenance) -> String {
    let mut out = String::from("# Regression\n\n");
    out.push_str(&provenance_lines(prov));
    out.push_str("\n∗ p < 0.01, † p < 0.05\n\n");
    if let Some(first) = results.first() {
        let refs: Vec<String> = first.references.iter().map(|(f, l)| format!("{f} = {l}")).collect();
        let _ = writeln!(out, "Reference levels: {}\n", refs.join(", "));
    }
    out.push_str("| Ind. Var. |");
    for r in results {
        let _ = write!(out, " {} |", r.dependent);
    }
    out.push_str("\n|---|");
    for _ in results {
        out.push_str("---:|");
    }
    out.push('\n');
    let coef = |t: &crate::analysis::Term| format!("{:.4}{}", t.estimate, t.marker());
    out.push_str("| Intercept |");
    for r in results {
        let _ = write!(out, " {} |", coef(&r.intercept));
    }
    out.push('\n');
    for factor in FACTORS {
        let mut levels: Vec<&str> = Vec::new();
        for r in results {
            for t in r.terms.iter().filter(|t| t.factor.as_deref() == Some(factor)) {
                if !levels.contains(&t.level.as_str()) {
                    levels.push(&t.level);
                }
            }
        }
        if levels.is_empty() {
            continue;
        }
        let _ = write!(out, "| *{factor}* |");
        for _ in results {
            out.push_str(" |");
        }
        out.push('\n');
        for level in levels {
            let _ = write!(out, "| {level} |");
            for r in results {
                match r.term(factor, level) {
                    Some(t) => {
                        let _ = write!(out, " {} |", coef(t));
                    }
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
    }
    for (label, f) in [
        ("n", (|r: &RegressionResult| r.n.to_string()) as fn(&RegressionResult) -> String),
        ("R²", |r| format!("{:.4}", r.r_squared)),
    ] {
        let _ = write!(out, "| {label} |");
        for r in results {
            let _ = write!(out, " {} |", f(r));
        }
        out.push('\n');
    }
    for r in results {
        for w in &r.warnings {
            let _ = writeln!(out, "\nNote ({}): {w}", r.dependent);
        }
    }
    out
}

pub fn regression_csv(result: &RegressionResult, prov: &Provenance) -> String {
    let mut w = writer();
    w.write_record([
        "dependent", "factor", "level", "estimate", "std_error", "t", "p", "marker", "n", "r_squared",
        "config_digest", "template_checksum",
    ])
    .expect("write");
    for t in std::iter::once(&result.intercept).chain(&result.terms) {
        w.write_record([
            result.dependent.label().to_string(),
            t.factor.clone().unwrap_or_default(),
            t.level.clone(),
            format!("{:e}", t.estimate),
            format!("{:e}", t.std_error),
            format!("{:e}", t.t),
            format!("{:e}", t.p),
            t.marker().to_string(),
            result.n.to_string(),
            format!("{:e}", result.r_squared),
            prov.config_digest.clone(),
            prov.template_checksum.clone(),
        ])
        .expect("write");
    }
    finish(w)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary<'a> {
    pub provenance: &'a Provenance,
    pub cells: usize,
    pub valid_games: u32,
    pub invalid_games: u32,
    pub analysis: &'a RunAnalysis,
    pub regressions: &'a [RegressionResult],
}

/// Harness conventions a reader needs to interpret the tables: the retry
/// budget for malformed replies, how often the strategy menu is sent, and
/// how many games ended invalid.
pub fn policy_note(transcripts: &[Transcript]) -> String {
    let budgets: BTreeSet<u32> = transcripts.iter().map(|t| t.config.max_retries).collect();
    let menus: BTreeSet<bool> = transcripts.iter().map(|t| t.config.menu_every_round).collect();
    let invalid = transcripts.iter().filter(|t| !t.valid).count();
    let retries: u64 = transcripts
        .iter()
        .map(|t| u64::from(t.retries.proposal + t.retries.decision))
        .sum();
    let list = |v: Vec<String>| v.join(", ");
    format!(
        "Harness policy: malformed replies get up to {} correction retries, after which the game is invalid \
         and left out of every metric ({invalid} of {} games invalid, {retries} retries in total). \
         Strategy menu sent {}. Agent sessions reset every game.\n",
        list(budgets.iter().map(u32::to_string).collect()),
        transcripts.len(),
        list(menus.iter().map(|&m| if m { "every round" } else { "once per game" }.to_string()).collect()),
    )
}

pub fn summary_json(analysis: &RunAnalysis, regressions: &[RegressionResult], prov: &Provenance) -> String {
    let summary = Summary {
        provenance: prov,
        cells: analysis.metrics.len() + analysis.empty_cells.len(),
        valid_games: analysis.metrics.iter().map(|m| m.valid_games).sum(),
        invalid_games: analysis.metrics.iter().map(|m| m.invalid_games).sum::<u32>()
            + analysis.empty_cells.iter().map(|(_, n)| n).sum::<u32>(),
        analysis,
        regressions,
    };
    let mut s = serde_json::to_string_pretty(&summary).expect("summary serializes");
    s.push('\n');
    s
}
