//! Result tables shaped like the standard image-text-retrieval comparison:
//! one row per (model, dataset, attack method), columns TR/IR x R@1/5/10,
//! values are attack success rates in percent. A static fixture carries the
//! published reference numbers for the baseline methods so report formatting
//! can be exercised without rerunning them.

use crate::error::{Result, RunnerError};
use natpatch_core::eval::RetrievalReport;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const TABLE_HEADER: [&str; 9] =
    ["model", "dataset", "method", "tr_r1", "tr_r5", "tr_r10", "ir_r1", "ir_r5", "ir_r10"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub dataset: String,
    pub method: String,
    /// ASR percentages; None renders as "undefined" (no clean-correct query).
    pub tr: [Option<f64>; 3],
    pub ir: [Option<f64>; 3],
}

#[derive(Debug, Deserialize)]
struct ReferenceFixture {
    provenance: String,
    rows: Vec<FixtureRow>,
}

#[derive(Debug, Deserialize)]
struct FixtureRow {
    model: String,
    dataset: String,
    method: String,
    tr: [f64; 3],
    ir: [f64; 3],
}

const REFERENCE_JSON: &str = include_str!("../fixtures/reference_results.json");

/// Published baseline/our reference rows (ASR percent).
pub fn reference_rows() -> Result<(String, Vec<ReportRow>)> {
    let fixture: ReferenceFixture = serde_json::from_str(REFERENCE_JSON)?;
    let rows = fixture
        .rows
        .into_iter()
        .map(|r| ReportRow {
            model: r.model,
            dataset: r.dataset,
            method: r.method,
            tr: r.tr.map(Some),
            ir: r.ir.map(Some),
        })
        .collect();
    Ok((fixture.provenance, rows))
}

/// Convert a computed retrieval report into one table row (rates scaled to
/// percent).
pub fn row_from_retrieval_report(
    report: &RetrievalReport,
    model: &str,
    dataset: &str,
    method: &str,
) -> ReportRow {
    let scale = |a: &natpatch_core::eval::AsrOutcome| a.rate.map(|r| r * 100.0);
    ReportRow {
        model: model.to_string(),
        dataset: dataset.to_string(),
        method: method.to_string(),
        tr: std::array::from_fn(|i| scale(&report.text_retrieval.asr[i])),
        ir: std::array::from_fn(|i| scale(&report.image_retrieval.asr[i])),
    }
}

fn cell(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.2}"),
        None => "undefined".to_string(),
    }
}

pub fn render_table(rows: &[ReportRow]) -> String {
    let mut out = TABLE_HEADER.join(",");
    out.push('\n');
    for row in rows {
        let cells = [
            row.model.clone(),
            row.dataset.clone(),
            row.method.clone(),
            cell(row.tr[0]),
            cell(row.tr[1]),
            cell(row.tr[2]),
            cell(row.ir[0]),
            cell(row.ir[1]),
            cell(row.ir[2]),
        ];
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_table_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    std::fs::write(path, render_table(rows))?;
    Ok(())
}

/// Parse a rendered table back into rows (used by schema checks and tests).
pub fn parse_table_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(RunnerError::Csv)?;
    let headers = reader.headers()?.clone();
    let expected: Vec<&str> = TABLE_HEADER.to_vec();
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(RunnerError::Config(format!(
            "summary schema mismatch: expected {expected:?}, got {got:?}"
        )));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(RunnerError::Csv)?;
        let parse = |s: &str| -> Option<f64> {
            if s == "undefined" {
                None
            } else {
                s.parse::<f64>().ok()
            }
        };
        rows.push(ReportRow {
            model: record[0].to_string(),
            dataset: record[1].to_string(),
            method: record[2].to_string(),
            tr: [parse(&record[3]), parse(&record[4]), parse(&record[5])],
            ir: [parse(&record[6]), parse(&record[7]), parse(&record[8])],
        });
    }
    Ok(rows)
}
