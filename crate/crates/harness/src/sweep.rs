//! Multi-seed driver: seeds run in parallel, then final global metrics are
//! summarized as mean and sample standard deviation across seeds.

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::{final_global, fmt_value, read_metrics};
use crate::run::{run, run_dir, RunManifest, METRICS_FILE};
use anfr_core::stats::mean_sample_std;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub manifests: Vec<RunManifest>,
    pub summary: Vec<SummaryRow>,
    pub dir: PathBuf,
}

/// Final-round global metrics of each seed, read back from its CSV.
pub fn per_seed_finals(root: &Path, name: &str, seeds: &[u64]) -> Result<Vec<(u64, BTreeMap<String, f64>)>> {
    seeds
        .iter()
        .map(|&s| Ok((s, final_global(&read_metrics(&run_dir(root, name, s).join(METRICS_FILE))?))))
        .collect()
}

/// Mean and sample std of each metric present in every seed.
pub fn summarize(finals: &[(u64, BTreeMap<String, f64>)]) -> Vec<SummaryRow> {
    let Some((_, first)) = finals.first() else {
        return Vec::new();
    };
    first
        .keys()
        .filter(|k| finals.iter().all(|(_, m)| m.contains_key(*k)))
        .map(|k| {
            let xs: Vec<f64> = finals.iter().map(|(_, m)| m[k]).collect();
            let (mean, std) = mean_sample_std(&xs);
            SummaryRow {
                metric: k.clone(),
                mean,
                std,
                n: xs.len(),
            }
        })
        .collect()
}

pub fn sweep(cfg: &ExperimentConfig, seeds: &[u64], root: &Path) -> Result<SweepOutcome> {
    if seeds.is_empty() {
        return Err(HarnessError::Report("sweep needs at least one seed".into()));
    }
    let results: Vec<Result<RunManifest>> = seeds.par_iter().map(|&s| run(cfg, s, root)).collect();
    let manifests = results.into_iter().collect::<Result<Vec<_>>>()?;
    let name = &cfg.experiment.name;
    let finals = per_seed_finals(root, name, seeds)?;
    let summary = summarize(&finals);
    let dir = root.join(name);

    let mut w = csv::Writer::from_path(dir.join("per_seed.csv"))?;
    w.write_record(["seed", "metric", "value"])?;
    for (s, m) in &finals {
        for (k, v) in m {
            w.write_record([s.to_string(), k.clone(), fmt_value(*v)])?;
        }
    }
    w.flush().map_err(|e| HarnessError::io(&dir, e))?;

    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["metric", "mean", "std", "n"])?;
    for r in &summary {
        w.write_record([r.metric.clone(), fmt_value(r.mean), fmt_value(r.std), r.n.to_string()])?;
    }
    w.flush().map_err(|e| HarnessError::io(&dir, e))?;
    Ok(SweepOutcome { manifests, summary, dir })
}
