//! CSV and JSON result tables.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::write_json;
use crate::error::{Error, Result};
use crate::metrics::{AccuracyPoint, CaseMetrics, RiskCoverageCurve};
use crate::stats::PairwiseMatrix;

fn csv_err(path: &Path, source: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// Columns `case_id, method, dice, brier, auroc, aurc`; a missing AUROC is an empty cell.
pub fn write_case_metrics(path: &Path, rows: &[CaseMetrics]) -> Result<()> {
    write_rows(path, rows)
}

pub fn read_case_metrics(path: &Path) -> Result<Vec<CaseMetrics>> {
    read_rows(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub coverage: f64,
    pub risk: f64,
}

pub fn write_risk_coverage(path: &Path, curve: &RiskCoverageCurve) -> Result<()> {
    write_rows(
        path,
        curve
            .coverage
            .iter()
            .zip(&curve.risk)
            .map(|(&coverage, &risk)| CurveRow { coverage, risk }),
    )
}

pub fn read_risk_coverage(path: &Path) -> Result<Vec<CurveRow>> {
    read_rows(path)
}

/// Columns `threshold, accuracy, retained_fraction`.
pub fn write_accuracy_curve(path: &Path, points: &[AccuracyPoint]) -> Result<()> {
    write_rows(path, points)
}

pub fn read_accuracy_curve(path: &Path) -> Result<Vec<AccuracyPoint>> {
    read_rows(path)
}

/// Per-metric matrices plus the all-metric column-sum row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub methods: Vec<String>,
    pub cases: usize,
    pub blocks: Vec<PairwiseMatrix>,
    pub combined_column_sums: Vec<i32>,
}

/// One row per (metric, row method) with a cell per column method, then a
/// `sum` row per metric and a final `all` row.
pub fn write_comparison_csv(path: &Path, report: &ComparisonReport) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["metric".to_string(), "row".to_string()];
    header.extend(report.methods.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for b in &report.blocks {
        for (r, row) in b.cells.iter().enumerate() {
            let mut rec = vec![b.metric.clone(), b.methods[r].clone()];
            rec.extend(row.iter().map(i32::to_string));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        let mut rec = vec![b.metric.clone(), "sum".to_string()];
        rec.extend(b.column_sums.iter().map(i32::to_string));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    let mut rec = vec!["all".to_string(), "sum".to_string()];
    rec.extend(report.combined_column_sums.iter().map(i32::to_string));
    w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_comparison_json(path: &Path, report: &ComparisonReport) -> Result<()> {
    write_json(path, report)
}
