//! Experiment configuration: a TOML document with the sections
//! `[experiment]`, `[model]`, `[data]`, `[fed]`, `[dp]` and `[analysis]`.
//! The grammar and every default are listed in `docs/config.md`.

use crate::error::{HarnessError, Result};
use anfr_core::data::{ColorShiftConfig, PartitionConfig, PartitionScheme};
use anfr_core::dp::DpConfig;
use anfr_core::fed::{Aggregation, FedConfig};
use anfr_core::nn::{Architecture, AttentionConfig, ModelSpec, NormKind};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub name: String,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Save the global model every this many rounds; 0 keeps only the
    /// initial and final checkpoints.
    pub checkpoint_every: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            name: "experiment".into(),
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            checkpoint_every: 0,
        }
    }
}

fn default_widths() -> Vec<usize> {
    ModelSpec::default().widths
}

fn default_depths() -> Vec<usize> {
    ModelSpec::default().depths
}

fn default_norm_groups() -> usize {
    ModelSpec::default().norm_groups
}

fn default_alpha() -> f64 {
    ModelSpec::default().alpha
}

fn default_attention_gain() -> f64 {
    ModelSpec::default().attention_gain
}

/// Model options; class count and image size default to the data section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Architecture,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_depths")]
    pub depths: Vec<usize>,
    pub num_classes: Option<usize>,
    pub image_size: Option<usize>,
    pub attention: Option<AttentionConfig>,
    #[serde(default = "default_norm_groups")]
    pub norm_groups: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_attention_gain")]
    pub attention_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub num_clients: usize,
    pub num_classes: usize,
    pub samples_per_client: usize,
    pub shift_strength: f64,
    pub image_size: usize,
    pub noise_std: f64,
    /// `feature_shift` keeps the generator's client shards; label schemes
    /// re-partition the pooled samples.
    pub scheme: PartitionScheme,
    pub alpha: f64,
    pub k: usize,
    pub skew_exponent: f64,
    /// Tail fraction of each client's shard held out for evaluation.
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let g = ColorShiftConfig::default();
        let p = PartitionConfig::default();
        DataSection {
            num_clients: g.num_clients,
            num_classes: g.num_classes,
            samples_per_client: g.samples_per_client,
            shift_strength: g.shift_strength,
            image_size: g.image_size,
            noise_std: g.noise_std,
            scheme: PartitionScheme::FeatureShift,
            alpha: p.alpha,
            k: p.k,
            skew_exponent: p.skew_exponent,
            test_fraction: 0.2,
        }
    }
}

impl DataSection {
    pub fn generator(&self, seed: u64) -> ColorShiftConfig {
        ColorShiftConfig {
            num_clients: self.num_clients,
            num_classes: self.num_classes,
            samples_per_client: self.samples_per_client,
            shift_strength: self.shift_strength,
            image_size: self.image_size,
            noise_std: self.noise_std,
            seed,
        }
    }

    pub fn partition(&self, seed: u64) -> PartitionConfig {
        PartitionConfig {
            scheme: self.scheme,
            alpha: self.alpha,
            k: self.k,
            skew_exponent: self.skew_exponent,
            shift_strength: self.shift_strength,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    /// Class selectivity before and after federation.
    pub csi: bool,
    /// Channel-attention statistics of the final model, when it has
    /// attention blocks.
    pub attention: bool,
    /// Samples per forward pass during analysis.
    pub chunk: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            csi: true,
            attention: true,
            chunk: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub fed: FedConfig,
    pub dp: Option<DpConfig>,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

impl ExperimentConfig {
    /// Fully resolved model specification.
    pub fn model_spec(&self) -> ModelSpec {
        let m = &self.model;
        ModelSpec {
            architecture: m.architecture,
            widths: m.widths.clone(),
            depths: m.depths.clone(),
            num_classes: m.num_classes.unwrap_or(self.data.num_classes),
            in_channels: 3,
            image_size: m.image_size.unwrap_or(self.data.image_size),
            attention: m.attention,
            norm: None,
            norm_groups: m.norm_groups,
            alpha: m.alpha,
            attention_gain: m.attention_gain,
        }
        .resolved()
    }

    /// Federation settings for one seed.
    pub fn fed_for_seed(&self, seed: u64) -> FedConfig {
        FedConfig {
            seed,
            ..self.fed.clone()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Serialize(e.to_string()))
    }

    fn resolve(&mut self) {
        let spec = self.model_spec();
        self.model.num_classes = Some(spec.num_classes);
        self.model.image_size = Some(spec.image_size);
        self.model.attention = spec.attention;
    }
}

/// Parses, resolves and validates a configuration document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| syntax_error(text, &e))?;
    let located = |field: &str, message: String| HarnessError::Config {
        line: locate(text, field),
        field: field.to_string(),
        message,
    };
    if cfg.fed.seed != 0 {
        return Err(located("fed.seed", "per-run seeds come from `experiment.seeds`; leave at 0".into()));
    }
    if let Some(n) = cfg.model.num_classes {
        if n != cfg.data.num_classes {
            return Err(located(
                "model.num_classes",
                format!("{n} differs from data.num_classes = {}", cfg.data.num_classes),
            ));
        }
    }
    if let Some(s) = cfg.model.image_size {
        if s != cfg.data.image_size {
            return Err(located(
                "model.image_size",
                format!("{s} differs from data.image_size = {}", cfg.data.image_size),
            ));
        }
    }
    cfg.resolve();
    validate(&cfg).map_err(|(field, message)| located(&field, message))?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    parse_config(&text)
}

fn validate(cfg: &ExperimentConfig) -> std::result::Result<(), (String, String)> {
    let err = |field: &str, e: &dyn std::fmt::Display| Err((field.to_string(), e.to_string()));
    let ex = &cfg.experiment;
    if ex.seeds.is_empty() {
        return err("experiment.seeds", &"at least one seed is required");
    }
    let mut sorted = ex.seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != ex.seeds.len() {
        return err("experiment.seeds", &"seeds must be distinct");
    }
    if ex.name.is_empty() || ex.name.contains(['/', '\\']) {
        return err("experiment.name", &"name must be non-empty without path separators");
    }
    let d = &cfg.data;
    if let Err(e) = d.generator(0).validate() {
        return err("data", &e);
    }
    if d.scheme != PartitionScheme::FeatureShift {
        if let Err(e) = d.partition(0).validate(d.num_classes) {
            return err("data.scheme", &e);
        }
    }
    if !(0.0..1.0).contains(&d.test_fraction) {
        return err("data.test_fraction", &"must be in [0, 1)");
    }
    let spec = cfg.model_spec();
    if let Err(e) = spec.validate() {
        return err("model", &e);
    }
    if let Err(e) = cfg.fed.validate() {
        return err("fed", &e);
    }
    let batch_norm = spec.architecture.norm_kind() == NormKind::Batch;
    if cfg.fed.aggregation == Aggregation::FedBn && !batch_norm {
        return err(
            "fed.aggregation",
            &format!("fedbn needs batch-norm layers; {} has none", spec.architecture),
        );
    }
    if let Some(dp) = &cfg.dp {
        if batch_norm {
            return err(
                "dp",
                &format!(
                    "{} uses batch norm, which mixes samples and cannot be trained with per-sample privacy",
                    spec.architecture
                ),
            );
        }
        if let Err(e) = dp.validate() {
            return err("dp", &e);
        }
    }
    if cfg.analysis.chunk == 0 {
        return err("analysis.chunk", &"must be >= 1");
    }
    Ok(())
}

fn syntax_error(text: &str, e: &toml::de::Error) -> HarnessError {
    let message = e.message().to_string();
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            let field = field_at_line(text, line);
            HarnessError::Config {
                line: Some(line),
                field,
                message,
            }
        }
        None => HarnessError::Syntax(message),
    }
}

/// `section.key` for the assignment on `line`, or the section itself.
fn field_at_line(text: &str, line: usize) -> String {
    let mut section = String::new();
    for (i, l) in text.lines().enumerate() {
        let t = l.trim();
        if let Some(h) = header(t) {
            section = h.to_string();
        }
        if i + 1 == line {
            if let Some((k, _)) = t.split_once('=') {
                let k = k.trim();
                return if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            }
            break;
        }
    }
    section
}

fn header(line: &str) -> Option<&str> {
    let t = line.split('#').next()?.trim();
    let inner = t.strip_prefix('[')?.strip_suffix(']')?;
    Some(inner.trim_matches(|c| c == '[' || c == ']').trim())
}

fn locate_key(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, l) in text.lines().enumerate() {
        let t = l.trim();
        if let Some(h) = header(t) {
            current = h.to_string();
            if key.is_empty() && current == section {
                return Some(i + 1);
            }
            continue;
        }
        if !key.is_empty() && current == section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

/// 1-based line of a dotted field, falling back to enclosing sections.
pub fn locate(text: &str, field: &str) -> Option<usize> {
    let parts: Vec<&str> = field.split('.').collect();
    (1..=parts.len()).rev().find_map(|n| {
        locate_key(text, &parts[..n - 1].join("."), parts[n - 1])
            .or_else(|| locate_key(text, &parts[..n].join("."), ""))
    })
}
