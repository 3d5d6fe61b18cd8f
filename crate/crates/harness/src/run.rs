//! One (config, seed) run: generate and partition data, federate, analyze,
//! and write artifacts under `{root}/{name}/seed_{seed}`.

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::{self, fmt_value, METRICS_SCHEMA_VERSION};
use anfr_core::analysis::{
    attention_stats, capture_class_conditional, csi_distribution, csi_records, CsiRecord, Phase,
};
use anfr_core::data::{partition, split_holdout, write_index_file, ClientShard, Dataset, PartitionScheme};
use anfr_core::fed::{derive_seed, run_federation_with, FederationInput, FederationResult};
use anfr_core::nn::Model;
use anfr_core::stats::mean_std;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
const PARTITION_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    pub metrics_schema_version: u32,
    pub checkpoint_format_version: u32,
    pub name: String,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Artifact paths relative to the run directory.
    pub outputs: Vec<String>,
    /// Resolved configuration; `config.toml` holds the same text.
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        toml::from_str(&text).map_err(|e| HarnessError::Serialize(format!("{}: {e}", path.display())))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| HarnessError::Serialize(e.to_string()))?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))
    }
}

pub fn run_dir(root: &Path, name: &str, seed: u64) -> PathBuf {
    root.join(name).join(format!("seed_{seed}"))
}

/// Data, shards and evaluation splits of one run.
pub struct Prepared {
    pub data: Dataset,
    pub shards: Vec<ClientShard>,
    pub test: Vec<usize>,
    pub client_test: Vec<Vec<usize>>,
}

/// Generates the dataset, applies the partition scheme and holds out the
/// tail of every client shard for evaluation.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let d = &cfg.data;
    let (data, generated) = d.generator(seed).generate()?;
    let shards = match d.scheme {
        PartitionScheme::FeatureShift => generated,
        _ => partition(
            &data.labels,
            data.num_classes,
            d.num_clients,
            &d.partition(derive_seed(seed, &[PARTITION_STREAM])),
        )?,
    };
    let mut train = Vec::with_capacity(shards.len());
    let mut client_test = Vec::with_capacity(shards.len());
    for s in &shards {
        let (mut t, held) = split_holdout(std::slice::from_ref(s), &data.labels, data.num_classes, d.test_fraction)?;
        train.push(t.remove(0));
        client_test.push(held);
    }
    let mut test: Vec<usize> = client_test.concat();
    test.sort_unstable();
    if test.is_empty() {
        return Err(HarnessError::Config {
            line: None,
            field: "data.test_fraction".into(),
            message: "no held-out samples; raise test_fraction or samples_per_client".into(),
        });
    }
    Ok(Prepared {
        data,
        shards: train,
        test,
        client_test,
    })
}

/// Runs one seed; on error the manifest is marked failed and partial
/// artifacts are kept.
pub fn run(cfg: &ExperimentConfig, seed: u64, root: &Path) -> Result<RunManifest> {
    let dir = run_dir(root, &cfg.experiment.name, seed);
    std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let mut manifest = RunManifest {
        engine_version: ENGINE_VERSION.into(),
        metrics_schema_version: METRICS_SCHEMA_VERSION,
        checkpoint_format_version: checkpoint::FORMAT_VERSION,
        name: cfg.experiment.name.clone(),
        seed,
        status: RunStatus::Running,
        error: None,
        outputs: Vec::new(),
        config: cfg.clone(),
    };
    manifest.save(&dir)?;
    let result = execute(cfg, seed, &dir, &mut manifest.outputs);
    match result {
        Ok(()) => {
            manifest.status = RunStatus::Completed;
            manifest.save(&dir)?;
            Ok(manifest)
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
            manifest.save(&dir)?;
            Err(e)
        }
    }
}

fn write_text(dir: &Path, rel: &str, text: &str, outputs: &mut Vec<String>) -> Result<()> {
    let path = dir.join(rel);
    std::fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
    outputs.push(rel.into());
    Ok(())
}

fn execute(cfg: &ExperimentConfig, seed: u64, dir: &Path, outputs: &mut Vec<String>) -> Result<()> {
    write_text(dir, CONFIG_FILE, &cfg.to_toml()?, outputs)?;
    let prepared = prepare_data(cfg, seed)?;
    write_text(dir, "partition.txt", &write_index_file(&prepared.shards), outputs)?;
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| HarnessError::io(&ckpt_dir, e))?;

    let spec = cfg.model_spec();
    let fed = cfg.fed_for_seed(seed);
    let input = FederationInput {
        data: &prepared.data,
        shards: &prepared.shards,
        test: &prepared.test,
        client_test: Some(&prepared.client_test),
    };
    let initial = anfr_core::nn::build_model(&spec, seed)?;
    checkpoint::save(&ckpt_dir.join("initial.ckpt"), initial.params())?;
    outputs.push("checkpoints/initial.ckpt".into());

    let every = cfg.experiment.checkpoint_every;
    let mut saved = Vec::new();
    let result: FederationResult = run_federation_with(&spec, &input, &fed, cfg.dp.as_ref(), |m, server| {
        if every > 0 && m.round % every == 0 && m.round < fed.rounds {
            let rel = format!("checkpoints/round_{:04}.ckpt", m.round);
            checkpoint::save(&dir.join(&rel), &server.global).map_err(|e| anfr_core::Error::InvalidArgument(e.to_string()))?;
            saved.push(rel);
        }
        Ok(())
    })?;
    outputs.extend(saved);

    metrics::write_metrics(&dir.join(METRICS_FILE), &result.metrics)?;
    outputs.push(METRICS_FILE.into());
    metrics::write_timings(&dir.join("timings.csv"), &result.metrics)?;
    outputs.push("timings.csv".into());

    if fed.rounds > 0 {
        checkpoint::save(&ckpt_dir.join("final.ckpt"), result.global.params())?;
        outputs.push("checkpoints/final.ckpt".into());
        for c in result.clients.iter().filter(|c| !c.personal.is_empty()) {
            let rel = format!("checkpoints/client_{}.ckpt", c.client_id);
            checkpoint::save(&dir.join(&rel), &c.personal)?;
            outputs.push(rel);
        }
        analyze(cfg, &prepared, &result, dir, outputs)?;
    }
    Ok(())
}

/// Analysis samples: the held-out pool when it covers every class, else
/// every sample.
fn analysis_indices(p: &Prepared) -> Vec<usize> {
    let hist = p.data.histogram(&p.test);
    if hist.iter().all(|&n| n > 0) {
        p.test.clone()
    } else {
        (0..p.data.len()).collect()
    }
}

fn analyze(cfg: &ExperimentConfig, p: &Prepared, r: &FederationResult, dir: &Path, outputs: &mut Vec<String>) -> Result<()> {
    let idx = analysis_indices(p);
    let chunk = cfg.analysis.chunk;
    let name = cfg.model.architecture.name();
    if cfg.analysis.csi {
        let mut records: Vec<CsiRecord> = Vec::new();
        for (model, phase) in [(&r.initial, Phase::PreFl), (&r.global, Phase::PostFl)] {
            let points = capture_class_conditional::<Model>(model, &p.data, &idx, chunk)?;
            records.extend(csi_records(&points, name, phase));
        }
        write_csi(dir, &records, outputs)?;
    }
    if cfg.analysis.attention && r.global.has_attention() {
        let s = attention_stats(&r.global, &p.data, &idx, chunk)?;
        let mut w = csv::Writer::from_path(dir.join("attention.csv"))?;
        w.write_record(["layer", "class", "channel", "mean_gate"])?;
        for rec in &s.records {
            for (class, row) in rec.class_means.iter().enumerate() {
                for (ch, v) in row.iter().enumerate() {
                    w.write_record([rec.layer.clone(), class.to_string(), ch.to_string(), fmt_value(*v)])?;
                }
            }
        }
        w.flush().map_err(|e| HarnessError::io(dir, e))?;
        outputs.push("attention.csv".into());
        let mut w = csv::Writer::from_path(dir.join("attention_summary.csv"))?;
        w.write_record(["layer", "variability", "degenerate"])?;
        for rec in &s.records {
            w.write_record([rec.layer.clone(), fmt_value(rec.variability), rec.degenerate.to_string()])?;
        }
        w.write_record(["all".into(), String::new(), s.degenerate.to_string()])?;
        w.flush().map_err(|e| HarnessError::io(dir, e))?;
        outputs.push("attention_summary.csv".into());
    }
    Ok(())
}

fn write_csi(dir: &Path, records: &[CsiRecord], outputs: &mut Vec<String>) -> Result<()> {
    let mut raw = csv::Writer::from_path(dir.join("csi.csv"))?;
    raw.write_record(["model", "phase", "layer", "position", "neuron", "csi"])?;
    let mut summary = csv::Writer::from_path(dir.join("csi_summary.csv"))?;
    summary.write_record(["model", "phase", "layer", "position", "n", "mean", "std", "skewness", "bandwidth"])?;
    let mut dist = csv::Writer::from_path(dir.join("csi_distribution.csv"))?;
    dist.write_record(["model", "phase", "layer", "position", "kind", "x", "value"])?;
    for r in records {
        let key = [r.model.clone(), r.phase.to_string(), r.layer.clone(), r.position.to_string()];
        for (j, v) in r.values.iter().enumerate() {
            raw.write_record(key.iter().cloned().chain([j.to_string(), fmt_value(*v)]))?;
        }
        let d = csi_distribution(&r.values)?;
        let (mean, std) = mean_std(&r.values);
        summary.write_record(key.iter().cloned().chain([
            d.n.to_string(),
            fmt_value(mean),
            fmt_value(std),
            fmt_value(d.skewness),
            fmt_value(d.bandwidth),
        ]))?;
        let bins = d.histogram.len() as f64;
        for (b, &count) in d.histogram.iter().enumerate() {
            let x = (b as f64 + 0.5) / bins;
            dist.write_record(key.iter().cloned().chain(["histogram".into(), fmt_value(x), count.to_string()]))?;
        }
        for &(x, f) in &d.density {
            dist.write_record(key.iter().cloned().chain(["density".into(), fmt_value(x), fmt_value(f)]))?;
        }
    }
    for w in [&mut raw, &mut summary, &mut dist] {
        w.flush().map_err(|e| HarnessError::io(dir, e))?;
    }
    outputs.extend(["csi.csv", "csi_summary.csv", "csi_distribution.csv"].map(String::from));
    Ok(())
}
