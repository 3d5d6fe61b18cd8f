//! Architecture × aggregation comparison table over completed runs.

use crate::error::{HarnessError, Result};
use crate::metrics::{final_global, fmt_value, read_metrics};
use crate::run::{RunManifest, RunStatus, MANIFEST_FILE, METRICS_FILE};
use anfr_core::fed::Aggregation;
use anfr_core::nn::Architecture;
use anfr_core::stats::mean_sample_std;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub metric: String,
    pub architectures: Vec<Architecture>,
    pub aggregations: Vec<Aggregation>,
    /// `cells[row][col]`, `None` where no run exists.
    pub cells: Vec<Vec<Option<Cell>>>,
}

/// Run directories under `root` holding a manifest, in sorted order.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| HarnessError::io(&dir, e))?;
        for e in entries {
            let p = e.map_err(|e| HarnessError::io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == MANIFEST_FILE) {
                out.push(dir.clone());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Collects the final-round global `metric` of every completed run.
pub fn build_report(root: &Path, metric: &str) -> Result<Report> {
    let mut groups: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for dir in find_runs(root)? {
        let m = RunManifest::load(&dir)?;
        if m.status != RunStatus::Completed {
            continue;
        }
        let finals = final_global(&read_metrics(&dir.join(METRICS_FILE))?);
        let Some(&v) = finals.get(metric) else { continue };
        let a = Architecture::ALL.iter().position(|&x| x == m.config.model.architecture).expect("known");
        let g = Aggregation::ALL.iter().position(|&x| x == m.config.fed.aggregation).expect("known");
        groups.entry((a, g)).or_default().push(v);
    }
    if groups.is_empty() {
        return Err(HarnessError::Report(format!(
            "no completed runs with metric `{metric}` under {}",
            root.display()
        )));
    }
    let mut rows: Vec<usize> = groups.keys().map(|k| k.0).collect();
    let mut cols: Vec<usize> = groups.keys().map(|k| k.1).collect();
    rows.sort_unstable();
    rows.dedup();
    cols.sort_unstable();
    cols.dedup();
    let cells = rows
        .iter()
        .map(|&a| {
            cols.iter()
                .map(|&g| {
                    groups.get(&(a, g)).map(|xs| {
                        let (mean, std) = mean_sample_std(xs);
                        Cell { mean, std, n: xs.len() }
                    })
                })
                .collect()
        })
        .collect();
    Ok(Report {
        metric: metric.to_string(),
        architectures: rows.iter().map(|&a| Architecture::ALL[a]).collect(),
        aggregations: cols.iter().map(|&g| Aggregation::ALL[g]).collect(),
        cells,
    })
}

impl Report {
    /// Row index of the highest mean in each column.
    pub fn best_per_column(&self) -> Vec<Option<usize>> {
        (0..self.aggregations.len())
            .map(|c| {
                (0..self.architectures.len())
                    .filter_map(|r| self.cells[r][c].as_ref().map(|cell| (r, cell.mean)))
                    .fold(None, |best: Option<(usize, f64)>, (r, m)| match best {
                        Some((_, b)) if b >= m => best,
                        _ => Some((r, m)),
                    })
                    .map(|(r, _)| r)
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["architecture", "aggregation", "metric", "mean", "std", "n"])?;
        for (r, arch) in self.architectures.iter().enumerate() {
            for (c, agg) in self.aggregations.iter().enumerate() {
                if let Some(cell) = &self.cells[r][c] {
                    w.write_record([
                        arch.name().to_string(),
                        agg.name().to_string(),
                        self.metric.clone(),
                        fmt_value(cell.mean),
                        fmt_value(cell.std),
                        cell.n.to_string(),
                    ])?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| HarnessError::Report(e.to_string()))
    }

    /// Aligned table of `mean ± std` in percent; the best cell of each
    /// column is wrapped in `**`.
    pub fn to_text(&self) -> String {
        let best = self.best_per_column();
        let mut table: Vec<Vec<String>> = vec![std::iter::once("architecture".to_string())
            .chain(self.aggregations.iter().map(|a| a.name().to_string()))
            .collect()];
        for (r, arch) in self.architectures.iter().enumerate() {
            let mut row = vec![arch.name().to_string()];
            for c in 0..self.aggregations.len() {
                row.push(match &self.cells[r][c] {
                    Some(cell) => {
                        let s = format!("{:.2} ± {:.2}", 100.0 * cell.mean, 100.0 * cell.std);
                        if best[c] == Some(r) {
                            format!("**{s}**")
                        } else {
                            s
                        }
                    }
                    None => "-".into(),
                });
            }
            table.push(row);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!("{} (final round, mean ± std over seeds, %)\n", self.metric);
        for (i, row) in table.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, &w))| {
                    let pad = w - s.chars().count();
                    if c == 0 {
                        format!("{s}{}", " ".repeat(pad))
                    } else {
                        format!("{}{s}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if i == 0 {
                let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                let _ = writeln!(out, "{}", "-".repeat(rule));
            }
        }
        out
    }
}

/// Builds the report and writes `report.csv` and `report.txt` into `root`.
pub fn write_report(root: &Path, metric: &str) -> Result<Report> {
    let report = build_report(root, metric)?;
    for (name, text) in [("report.csv", report.to_csv()?), ("report.txt", report.to_text())] {
        let path = root.join(name);
        std::fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
    }
    Ok(report)
}
