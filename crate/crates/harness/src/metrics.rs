//! Metrics CSV stream: one `(round, client, metric, value)` row per value,
//! where `client` is a client id or `global`.

use crate::error::{HarnessError, Result};
use anfr_core::fed::RoundMetrics;
use std::collections::BTreeMap;
use std::path::Path;

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const METRICS_HEADER: [&str; 4] = ["round", "client", "metric", "value"];
pub const GLOBAL: &str = "global";

/// Rows for one round in a fixed order: global metrics, then each client.
pub fn round_rows(m: &RoundMetrics) -> Vec<[String; 4]> {
    let r = m.round.to_string();
    let row = |client: String, metric: &str, value: f64| [r.clone(), client, metric.to_string(), fmt_value(value)];
    let mut rows = vec![
        row(GLOBAL.into(), "loss", m.global.loss),
        row(GLOBAL.into(), "accuracy", m.global.accuracy),
        row(GLOBAL.into(), "balanced_accuracy", m.global.balanced_accuracy),
    ];
    if let Some(b) = m.best_local_accuracy {
        rows.push(row(GLOBAL.into(), "best_local_accuracy", b));
    }
    if let Some(e) = m.epsilon {
        rows.push(row(GLOBAL.into(), "epsilon", e));
    }
    for &(c, loss) in &m.client_loss {
        rows.push(row(c.to_string(), "train_loss", loss));
    }
    for (c, e) in &m.client_eval {
        rows.push(row(c.to_string(), "local_loss", e.loss));
        rows.push(row(c.to_string(), "local_accuracy", e.accuracy));
        rows.push(row(c.to_string(), "local_balanced_accuracy", e.balanced_accuracy));
    }
    rows
}

/// Shortest decimal that round-trips to the same f64.
pub fn fmt_value(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_metrics(path: &Path, metrics: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for m in metrics {
        for row in round_rows(m) {
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Wall-clock seconds per round, kept apart so metrics stay deterministic.
pub fn write_timings(path: &Path, metrics: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "wall_clock_secs"])?;
    for m in metrics {
        w.write_record([m.round.to_string(), fmt_value(m.wall_clock_secs)])?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub round: usize,
    pub client: String,
    pub metric: String,
    pub value: f64,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(HarnessError::Report(format!("{}: unexpected header {header:?}", path.display())));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = || HarnessError::Report(format!("{}: malformed row {rec:?}", path.display()));
        out.push(MetricRow {
            round: rec[0].parse().map_err(|_| bad())?,
            client: rec[1].to_string(),
            metric: rec[2].to_string(),
            value: rec[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Global metrics of the last recorded round; empty when no round ran.
pub fn final_global(rows: &[MetricRow]) -> BTreeMap<String, f64> {
    let last = rows.iter().filter(|r| r.client == GLOBAL).map(|r| r.round).max();
    rows.iter()
        .filter(|r| r.client == GLOBAL && Some(r.round) == last)
        .map(|r| (r.metric.clone(), r.value))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use anfr_core::fed::EvalMetrics;

    fn round(r: usize, acc: f64) -> RoundMetrics {
        let e = EvalMetrics {
            loss: 0.5,
            accuracy: acc,
            balanced_accuracy: acc,
        };
        RoundMetrics {
            round: r,
            client_loss: vec![(0, 1.0), (1, 0.1 + 0.2)],
            global: e,
            client_eval: vec![(0, e)],
            best_local_accuracy: Some(acc),
            epsilon: None,
            wall_clock_secs: 1.5,
        }
    }

    #[test]
    fn test_write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics(&path, &[round(1, 0.25), round(2, 1.0 / 3.0)]).unwrap();
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.len(), 2 * 9);
        let last = final_global(&rows);
        assert_eq!(last["accuracy"], 1.0 / 3.0);
        assert!(!last.contains_key("epsilon"));
        assert!(rows.iter().any(|r| r.client == "1" && r.value == 0.1 + 0.2));
    }

    #[test]
    fn test_empty_stream_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics(&path, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "round,client,metric,value\n");
        assert!(final_global(&read_metrics(&path).unwrap()).is_empty());
    }
}
