//! Report emission: full JSON, plus a CSV projection whose trailing columns
//! follow the results-table layout (method, training_samples, auc,
//! precision, recall, f1).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{RunReport, RunnerError};
use crate::metrics::format_fixed4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown format {other:?}, expected json or csv")),
        }
    }
}

pub const CSV_HEADER: &str =
    "domain,level,aggregation,seed,method,training_samples,auc,precision,recall,f1";

impl RunReport {
    /// CSV of all successful cells, 4 decimal places, deterministic order.
    /// Failed cells live in the JSON report only.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for cell in &self.cells {
            let Some(m) = &cell.metrics else { continue };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                cell.domain,
                cell.level.name(),
                cell.aggregation.name(),
                cell.seed,
                cell.method(),
                cell.training_samples,
                format_fixed4(m.auc),
                format_fixed4(m.precision),
                format_fixed4(m.recall),
                format_fixed4(m.f1),
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn from_json(json: &str) -> Result<Self, RunnerError> {
        serde_json::from_str(json).map_err(|e| RunnerError::Config(e.to_string()))
    }
}

/// Writes `report.json` or `report.csv` under `out_dir` and returns the path.
pub fn emit_report(
    report: &RunReport,
    format: ReportFormat,
    out_dir: &Path,
) -> Result<PathBuf, RunnerError> {
    std::fs::create_dir_all(out_dir)?;
    let (name, body) = match format {
        ReportFormat::Json => ("report.json", report.to_json()),
        ReportFormat::Csv => ("report.csv", report.to_csv()),
    };
    let path = out_dir.join(name);
    std::fs::write(&path, body)?;
    Ok(path)
}
