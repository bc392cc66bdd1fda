//! Evaluation reports: JSON summary plus a precision/recall CSV.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lffn_core::eval::{evaluate, EvalConfig, EvalReport};
use lffn_core::formats::{parse_gt, parse_predictions};
use lffn_core::Result;

use crate::io::write_atomic;

pub const PR_CSV_HEADER: &str = "class_id,rank,recall,precision,score";

pub fn pr_csv(report: &EvalReport) -> String {
    let mut out = format!("{PR_CSV_HEADER}\n");
    for c in &report.classes {
        for (i, p) in c.curve.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{},{}", c.class_id, i + 1, p.recall, p.precision, p.score);
        }
    }
    out
}

pub fn report_json(report: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serialises");
    s.push('\n');
    s
}

/// Parses both files and evaluates. Parse errors carry the offending line.
pub fn evaluate_texts(pred_text: &str, gt_text: &str, classes: Option<&[usize]>, config: &EvalConfig) -> Result<EvalReport> {
    let gts = parse_gt(gt_text)?;
    let preds = parse_predictions(pred_text)?;
    evaluate(&preds, &gts, classes, config)
}

/// Writes `<stem>.json` and `<stem>_pr.csv` into `dir`, returning both paths.
pub fn write_report(report: &EvalReport, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    let json = dir.join(format!("{stem}.json"));
    let csv = dir.join(format!("{stem}_pr.csv"));
    write_atomic(&json, report_json(report).as_bytes())?;
    write_atomic(&csv, pr_csv(report).as_bytes())?;
    Ok((json, csv))
}
