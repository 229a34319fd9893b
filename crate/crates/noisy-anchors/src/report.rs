// SPDX-License-Identifier: Apache-2.0

//! Summaries of finished runs: a text summary, a method comparison table,
//! confidence/IoU statistics and averaged PR curves.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use noisy_anchors_core::eval::ConfIouStats;
use noisy_anchors_core::EvalReport;

use crate::config::SCHEMA_VERSION;
use crate::formats::PR_CSV_HEADER;
use crate::runner::{MeanStd, RunRecord};

/// Every `*.json` file in `dir` that parses as a run record, sorted by
/// file name.
pub fn load_records(dir: &Path) -> Result<Vec<(PathBuf, RunRecord)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let text = fs::read_to_string(&p)?;
        if let Ok(rec) = serde_json::from_str::<RunRecord>(&text) {
            out.push((p, rec));
        }
    }
    Ok(out)
}

fn reports(rec: &RunRecord) -> Vec<&EvalReport> {
    rec.seeds.iter().filter_map(|s| s.report.as_ref()).collect()
}

fn fmt_ms(m: Option<MeanStd>) -> String {
    m.map_or_else(
        || "n/a".to_string(),
        |m| format!("{:.4} +- {:.4}", m.mean, m.std),
    )
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn summary(records: &[RunRecord]) -> String {
    let mut out = format!("schema_version {SCHEMA_VERSION}\n");
    for r in records {
        let a = &r.aggregate;
        writeln!(
            out,
            "{} (method {}, config {})\n  seeds ok {} failed {}\n  AP {}  AP50 {}  AP75 {}",
            r.label,
            r.method,
            r.config_hash,
            a.seeds_ok,
            a.seeds_failed,
            fmt_ms(a.mean_ap),
            fmt_ms(a.ap50),
            fmt_ms(a.ap75),
        )
        .expect("write to string");
        for s in r.seeds.iter().filter(|s| !s.ok) {
            writeln!(
                out,
                "  seed {} failed: {}",
                s.seed,
                s.error.as_deref().unwrap_or("unknown")
            )
            .expect("write");
        }
    }
    out
}

pub const COMPARISON_HEADER: &str =
    "schema_version,label,method,config_hash,seeds_ok,seeds_failed,ap,ap_std,ap50,ap50_std,ap75,ap75_std\n";

pub fn comparison_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(COMPARISON_HEADER);
    for r in records {
        let a = &r.aggregate;
        let pair =
            |m: Option<MeanStd>| format!("{},{}", cell(m.map(|m| m.mean)), cell(m.map(|m| m.std)));
        writeln!(
            out,
            "{SCHEMA_VERSION},{},{},{},{},{},{},{},{}",
            r.label,
            r.method,
            r.config_hash,
            a.seeds_ok,
            a.seeds_failed,
            pair(a.mean_ap),
            pair(a.ap50),
            pair(a.ap75)
        )
        .expect("write to string");
    }
    out
}

/// Mean over seeds of each statistic, skipping seeds where it is undefined.
fn mean_stat(stats: &[ConfIouStats], f: fn(&ConfIouStats) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = stats.iter().filter_map(f).collect();
    MeanStd::of(&v).map(|m| m.mean)
}

pub const CONF_IOU_HEADER: &str =
    "schema_version,label,top_fraction,before_nms_confidence,before_nms_iou,\
before_nms_pearson,after_nms_confidence,after_nms_iou,after_nms_pearson\n";

/// Mean confidence and matched IoU of the most confident predictions before
/// and after NMS, one row per run, averaged over seeds.
pub fn confidence_iou_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(CONF_IOU_HEADER);
    for r in records {
        let reps = reports(r);
        let before: Vec<ConfIouStats> = reps.iter().map(|e| e.before_nms).collect();
        let after: Vec<ConfIouStats> = reps.iter().map(|e| e.after_nms).collect();
        let frac = reps.first().map(|e| e.top_fraction);
        writeln!(
            out,
            "{SCHEMA_VERSION},{},{},{},{},{},{},{},{}",
            r.label,
            cell(frac),
            cell(mean_stat(&before, |s| s.mean_confidence)),
            cell(mean_stat(&before, |s| s.mean_iou)),
            cell(mean_stat(&before, |s| s.pearson)),
            cell(mean_stat(&after, |s| s.mean_confidence)),
            cell(mean_stat(&after, |s| s.mean_iou)),
            cell(mean_stat(&after, |s| s.pearson)),
        )
        .expect("write to string");
    }
    out
}

/// Seed-averaged PR curve samples of one run: one row per (threshold,
/// recall point). Empty apart from the header when no seed succeeded.
pub fn pr_csv(record: &RunRecord) -> String {
    let mut out = String::from(PR_CSV_HEADER);
    let reps = reports(record);
    let Some(first) = reps.first() else {
        return out;
    };
    for (t, thresh) in first.iou_thresholds.iter().enumerate() {
        for (i, recall) in first.recall_grid.iter().enumerate() {
            let p = reps.iter().map(|e| e.precision[t][i]).sum::<f64>() / reps.len() as f64;
            writeln!(
                out,
                "{SCHEMA_VERSION},{},{thresh:.2},{recall:.2},{p}",
                record.label
            )
            .expect("write to string");
        }
    }
    out
}

/// File-name-safe version of a run label.
pub fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "+-=._".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Write all report files for the records found in `dir` and return the
/// summary text.
pub fn write_report(dir: &Path) -> Result<String> {
    let records: Vec<RunRecord> = load_records(dir)?.into_iter().map(|(_, r)| r).collect();
    ensure!(
        !records.is_empty(),
        "no run records found in {}",
        dir.display()
    );
    let text = summary(&records);
    fs::write(dir.join("summary.txt"), &text)?;
    fs::write(dir.join("comparison.csv"), comparison_csv(&records))?;
    fs::write(dir.join("confidence_iou.csv"), confidence_iou_csv(&records))?;
    for r in &records {
        fs::write(
            dir.join(format!("pr_{}.csv", file_stem(&r.label))),
            pr_csv(r),
        )?;
    }
    Ok(text)
}
