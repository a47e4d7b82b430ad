//! Run reports: a CSV timeline and a JSON bundle.
//!
//! CSV columns, in order:
//!
//! | column             | epoch rows | prune rows |
//! |--------------------|------------|------------|
//! | kind               | `epoch`    | `prune`    |
//! | epoch              | 1-based    | 1-based    |
//! | step               |            | 0-based    |
//! | lr                 | ✓          |            |
//! | train_loss         | ✓          |            |
//! | train_acc          | ✓          |            |
//! | eval_top1          | ✓          |            |
//! | eval_top5          | ✓          |            |
//! | kappa              | ✓          |            |
//! | macs               | ✓          |            |
//! | attribute          |            | ✓          |
//! | reference_value    |            | ✓          |
//! | selected_criterion |            | ✓          |
//! | selected_gap       |            | ✓          |
//! | candidate_gaps     |            | `name=gap;…` in candidate order |
//!
//! Rows are chronological; a pruning step precedes the epoch row of the
//! epoch it closes, since that row's evaluation is taken after pruning.
//! Lines end with LF.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{MfpError, Result};
use crate::flops::FlopsReport;
use crate::harness::ExperimentConfig;
use crate::meta::{EpochReport, PruneStepRecord};

pub const CSV_HEADER: [&str; 15] = [
    "kind",
    "epoch",
    "step",
    "lr",
    "train_loss",
    "train_acc",
    "eval_top1",
    "eval_top5",
    "kappa",
    "macs",
    "attribute",
    "reference_value",
    "selected_criterion",
    "selected_gap",
    "candidate_gaps",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalSummary {
    pub eval_loss: f64,
    pub eval_top1: f64,
    pub eval_top5: f64,
    pub kappa: usize,
    pub total_filters: usize,
}

/// Everything a run produces except the checkpoint and timing data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub config: ExperimentConfig,
    pub normalization: Option<Normalization>,
    pub epochs: Vec<EpochReport>,
    pub steps: Vec<PruneStepRecord>,
    pub final_summary: Option<FinalSummary>,
    pub flops: Option<FlopsReport>,
    /// Set when the run stopped early; the records above are partial.
    pub aborted: Option<String>,
}

fn epoch_row(e: &EpochReport) -> Vec<String> {
    let mut row = vec![
        "epoch".to_string(),
        e.epoch.to_string(),
        String::new(),
        e.lr.to_string(),
        e.train_loss.to_string(),
        e.train_acc.to_string(),
        e.eval_top1.to_string(),
        e.eval_top5.to_string(),
        e.kappa.to_string(),
        e.macs.to_string(),
    ];
    row.resize(CSV_HEADER.len(), String::new());
    row
}

fn prune_row(s: &PruneStepRecord) -> Vec<String> {
    let gaps = s
        .candidates
        .iter()
        .map(|c| format!("{}={}", c.criterion, c.gap))
        .collect::<Vec<_>>()
        .join(";");
    let mut row = vec![String::new(); CSV_HEADER.len()];
    row[0] = "prune".into();
    row[1] = s.epoch.to_string();
    row[2] = s.step.to_string();
    row[10] = s.attribute.to_string();
    row[11] = s.reference_value.to_string();
    row[12] = s.selected.to_string();
    row[13] = s.selected_gap().to_string();
    row[14] = gaps;
    row
}

/// Renders the CSV timeline (header plus one row per epoch and per step).
pub fn csv_string(epochs: &[EpochReport], steps: &[PruneStepRecord]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let csv_err = |e: csv::Error| MfpError::InvalidArgument(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    let mut step_iter = steps.iter().peekable();
    for e in epochs {
        while let Some(s) = step_iter.next_if(|s| s.epoch <= e.epoch) {
            w.write_record(prune_row(s)).map_err(csv_err)?;
        }
        w.write_record(epoch_row(e)).map_err(csv_err)?;
    }
    for s in step_iter {
        w.write_record(prune_row(s)).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| MfpError::InvalidArgument(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn json_string(bundle: &ReportBundle) -> Result<String> {
    let mut s = serde_json::to_string_pretty(bundle)?;
    s.push('\n');
    Ok(s)
}

pub fn parse_json(s: &str) -> Result<ReportBundle> {
    Ok(serde_json::from_str(s)?)
}

/// Writes `report.csv` and `report.json` into `out_dir`.
pub fn emit_report(bundle: &ReportBundle, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir).map_err(|e| MfpError::io(out_dir, e))?;
    let csv_path = out_dir.join("report.csv");
    let json_path = out_dir.join("report.json");
    std::fs::write(&csv_path, csv_string(&bundle.epochs, &bundle.steps)?).map_err(|e| MfpError::io(&csv_path, e))?;
    std::fs::write(&json_path, json_string(bundle)?).map_err(|e| MfpError::io(&json_path, e))?;
    Ok((csv_path, json_path))
}
