use std::fs;
use std::path::{Path, PathBuf};

use super::config::{CONFIG_FILE, METRICS_FILE};
use crate::error::Result;
use crate::regimes::RunMetrics;

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub metrics: RunMetrics,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Runs that have a config but no readable metrics, with the reason.
    pub missing: Vec<(PathBuf, String)>,
}

fn visit(root: &Path, dir: &Path, report: &mut Report) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    let metrics = dir.join(METRICS_FILE);
    if metrics.is_file() {
        match RunMetrics::read_json(&metrics) {
            Ok(m) => {
                let run = dir.strip_prefix(root).unwrap_or(dir).display().to_string();
                let run = if run.is_empty() { ".".to_string() } else { run };
                report.rows.push(ReportRow { run, metrics: m });
            }
            Err(e) => report.missing.push((metrics, e.to_string())),
        }
    } else if dir.join(CONFIG_FILE).is_file() {
        report.missing.push((metrics, "not found".into()));
    }
    for p in entries {
        if p.is_dir() {
            visit(root, &p, report)?;
        }
    }
    Ok(())
}

/// Collects every run under `dir`, sorted by regime name then run path.
pub fn collect_report(dir: &Path) -> Result<Report> {
    let mut report = Report::default();
    visit(dir, dir, &mut report)?;
    report
        .rows
        .sort_by(|a, b| (&a.metrics.regime, &a.run).cmp(&(&b.metrics.regime, &b.run)));
    Ok(report)
}

impl Report {
    /// Fixed-width table: run, regime, accuracy, tuned/total %, GFLOPs.
    pub fn render(&self) -> String {
        let header = ["run", "regime", "accuracy", "tuned/total(%)", "GFLOPs"];
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.run.clone(),
                    r.metrics.regime.clone(),
                    format!("{:.4}", r.metrics.accuracy),
                    format!("{:.4}", r.metrics.tuned_ratio),
                    format!("{:.6}", r.metrics.gflops),
                ]
            })
            .collect();
        let mut width = header.map(str::len);
        for row in &cells {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let line = |row: &[&str]| {
            row.iter()
                .zip(width)
                .enumerate()
                .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&header);
        out.push('\n');
        out.push_str(&width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        out.push('\n');
        for row in &cells {
            out.push_str(&line(&row.iter().map(String::as_str).collect::<Vec<_>>()));
            out.push('\n');
        }
        out
    }
}
