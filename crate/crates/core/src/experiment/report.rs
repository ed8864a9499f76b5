use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io, ExperimentConfig, ExperimentError};
use crate::attacks::AttackReport;
use crate::protocol::{AuditReport, History, Metrics};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

/// One trained configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    /// Keyed by split name.
    pub metrics: BTreeMap<String, Metrics>,
    pub audit: AuditReport,
    pub history: History,
}

/// Test MAE of the full federation relative to the local model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Uplift {
    pub local_mae: f64,
    pub hstfl_mae: f64,
    pub ratio: f64,
}

impl Uplift {
    pub fn from_runs(local: &RunSummary, full: &RunSummary) -> Self {
        let (l, h) = (local.metrics["test"].mae, full.metrics["test"].mae);
        Uplift {
            local_mae: l,
            hstfl_mae: h,
            ratio: h / l,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub runs: Vec<RunSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uplift: Option<Uplift>,
    pub attacks: Vec<AttackReport>,
    /// Wall-clock seconds per phase; the only non-reproducible field.
    pub timings: BTreeMap<String, f64>,
}

impl Report {
    pub fn new(config: ExperimentConfig, runs: Vec<RunSummary>, timings: BTreeMap<String, f64>) -> Self {
        Report {
            schema_version: config.schema_version,
            seed: config.seed,
            config,
            runs,
            uplift: None,
            attacks: Vec::new(),
            timings,
        }
    }

    /// `config,split,metric,value` rows, one per run, split, and metric.
    pub fn csv_rows(&self) -> Vec<[String; 4]> {
        let mut rows = Vec::new();
        for run in &self.runs {
            for (split, m) in &run.metrics {
                for (name, v) in m.named() {
                    rows.push([run.label.clone(), split.clone(), name.to_string(), v.to_string()]);
                }
            }
        }
        rows
    }
}

/// Writes `report.json` (authoritative) and `report.csv` into `dir`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let json_path = dir.join(REPORT_JSON);
    let json = serde_json::to_vec_pretty(report).expect("report serializes");
    std::fs::write(&json_path, json).map_err(|e| io(&json_path, e))?;
    let csv_path = dir.join(REPORT_CSV);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| io(&csv_path, e))?;
    w.write_record(["config", "split", "metric", "value"]).map_err(|e| io(&csv_path, e))?;
    for row in report.csv_rows() {
        w.write_record(&row).map_err(|e| io(&csv_path, e))?;
    }
    w.flush().map_err(|e| io(&csv_path, e))?;
    Ok(())
}
