//! Emission of training reports (CSV) and metric reports (JSON and aligned
//! plain-text tables).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use distillkit_core::eval::MetricReport;
use distillkit_core::train::TrainReport;

use crate::{IoError, Result};

/// CSV columns: `step,loss,accuracy,ms_per_step`.
pub fn train_report_csv(report: &TrainReport) -> String {
    let mut out = String::from("step,loss,accuracy,ms_per_step\n");
    for p in &report.points {
        let _ = writeln!(out, "{},{},{},{}", p.step, p.loss, p.accuracy, p.ms_per_step);
    }
    out
}

pub fn save_train_report(path: &Path, report: &TrainReport) -> Result<()> {
    fs::write(path, train_report_csv(report))
        .map_err(|e| IoError::file(path.display().to_string(), e))
}

/// Metric report as JSON.
pub fn metric_report_json(report: &MetricReport) -> serde_json::Value {
    match report {
        MetricReport::Classification { precision, recall, f1, per_class } => serde_json::json!({
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "per_class": per_class.iter().map(|c| serde_json::json!({
                "class": c.class,
                "precision": c.precision,
                "recall": c.recall,
                "f1": c.f1,
                "support": c.support,
            })).collect::<Vec<_>>(),
        }),
        MetricReport::Ranking { strict_acc, lenient_acc, mrr } => serde_json::json!({
            "strict_acc": strict_acc,
            "lenient_acc": lenient_acc,
            "mrr": mrr,
        }),
    }
}

/// Aligned plain-text table mirroring a P/R/F row layout (or S/L/M for
/// ranking reports).
pub fn metric_report_table(name: &str, report: &MetricReport) -> String {
    let mut out = String::new();
    match report {
        MetricReport::Classification { precision, recall, f1, per_class } => {
            let _ = writeln!(out, "{:<16} {:>8} {:>8} {:>8}", "", "P", "R", "F");
            let _ = writeln!(
                out,
                "{:<16} {:>8.2} {:>8.2} {:>8.2}",
                name,
                precision * 100.0,
                recall * 100.0,
                f1 * 100.0
            );
            for c in per_class {
                let _ = writeln!(
                    out,
                    "{:<16} {:>8.2} {:>8.2} {:>8.2}  (support {})",
                    format!("  {}", c.class),
                    c.precision * 100.0,
                    c.recall * 100.0,
                    c.f1 * 100.0,
                    c.support
                );
            }
        }
        MetricReport::Ranking { strict_acc, lenient_acc, mrr } => {
            let _ = writeln!(out, "{:<16} {:>8} {:>8} {:>8}", "", "S", "L", "M");
            let _ = writeln!(
                out,
                "{:<16} {:>8.2} {:>8.2} {:>8.2}",
                name,
                strict_acc * 100.0,
                lenient_acc * 100.0,
                mrr * 100.0
            );
        }
    }
    out
}

pub fn save_metric_report(dir: &Path, name: &str, report: &MetricReport) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| IoError::file(dir.display().to_string(), e))?;
    let json_path = dir.join(format!("{name}.json"));
    let json = serde_json::to_string_pretty(&metric_report_json(report))?;
    fs::write(&json_path, json).map_err(|e| IoError::file(json_path.display().to_string(), e))?;
    let table_path = dir.join(format!("{name}.txt"));
    fs::write(&table_path, metric_report_table(name, report))
        .map_err(|e| IoError::file(table_path.display().to_string(), e))?;
    Ok(vec![json_path, table_path])
}
