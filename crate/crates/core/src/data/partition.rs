//! Label-skew and quantity-skew partitioners.

use super::ClientShard;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

const MAX_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    Dirichlet,
    KClasses,
    QuantitySkew,
    /// Client shards come from the feature-shift generator itself.
    FeatureShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub scheme: PartitionScheme,
    pub alpha: f64,
    pub k: usize,
    pub skew_exponent: f64,
    pub shift_strength: f64,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            scheme: PartitionScheme::Dirichlet,
            alpha: 0.5,
            k: 2,
            skew_exponent: 1.6,
            shift_strength: 0.9,
            seed: 0,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.scheme {
            PartitionScheme::Dirichlet if !(self.alpha > 0.0 && self.alpha.is_finite()) => {
                Err(Error::config(format!("dirichlet alpha must be > 0, got {}", self.alpha)))
            }
            PartitionScheme::KClasses if self.k == 0 || self.k > num_classes => Err(Error::config(format!(
                "k must be in [1, {num_classes}], got {}",
                self.k
            ))),
            PartitionScheme::QuantitySkew if !(self.skew_exponent >= 0.0 && self.skew_exponent.is_finite()) => {
                Err(Error::config("skew_exponent must be >= 0"))
            }
            PartitionScheme::FeatureShift if !(0.0..=1.0).contains(&self.shift_strength) => {
                Err(Error::config("shift_strength must be in [0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

/// Dispatches to the label-based partitioner selected by `cfg`.
pub fn partition(labels: &[usize], num_classes: usize, num_clients: usize, cfg: &PartitionConfig) -> Result<Vec<ClientShard>> {
    cfg.validate(num_classes)?;
    match cfg.scheme {
        PartitionScheme::Dirichlet => partition_dirichlet(labels, num_classes, num_clients, cfg.alpha, cfg.seed),
        PartitionScheme::KClasses => partition_k_classes(labels, num_classes, num_clients, cfg.k, cfg.seed),
        PartitionScheme::QuantitySkew => {
            partition_quantity_skew(labels, num_classes, num_clients, cfg.skew_exponent, cfg.seed)
        }
        PartitionScheme::FeatureShift => Err(Error::Partition(
            "feature_shift shards are produced by the colorshift generator".into(),
        )),
    }
}

fn class_indices(labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut by = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::invalid(format!("label {l} out of range for {num_classes} classes")));
        }
        by[l].push(i);
    }
    Ok(by)
}

/// Integer counts summing to `total`, proportional to `weights`, by largest
/// remainder (ties to the lower index).
pub(crate) fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn check_clients(num_clients: usize, n: usize) -> Result<()> {
    if num_clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if n < num_clients {
        return Err(Error::Partition(format!("{n} samples cannot fill {num_clients} non-empty shards")));
    }
    Ok(())
}

fn finish(assign: Vec<Vec<usize>>, labels: &[usize], num_classes: usize) -> Vec<ClientShard> {
    assign
        .into_iter()
        .enumerate()
        .map(|(c, idx)| ClientShard::new(c, idx, labels, num_classes))
        .collect()
}

/// Per class, client proportions `p ~ Dir(α·1)`; draws leaving a client
/// empty are redrawn.
pub fn partition_dirichlet(
    labels: &[usize],
    num_classes: usize,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    check_clients(num_clients, labels.len())?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("dirichlet alpha must be > 0, got {alpha}")));
    }
    let by_class = class_indices(labels, num_classes)?;
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_RETRIES {
        let mut assign = vec![Vec::new(); num_clients];
        for idx in &by_class {
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            let mut p: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
            if p.iter().sum::<f64>() <= 0.0 {
                // All draws underflowed; the limit of such a draw is a point mass.
                p = vec![0.0; num_clients];
                p[0] = 1.0;
            }
            let counts = largest_remainder(idx.len(), &p);
            let mut start = 0;
            for (c, &n) in counts.iter().enumerate() {
                assign[c].extend_from_slice(&idx[start..start + n]);
                start += n;
            }
        }
        if assign.iter().all(|a| !a.is_empty()) {
            return Ok(finish(assign, labels, num_classes));
        }
    }
    Err(Error::Partition(format!(
        "no Dirichlet draw without empty shards after {MAX_RETRIES} retries"
    )))
}

/// Each client owns `k` classes assigned round-robin over a shuffled class
/// list; a class's samples are split evenly among its owners.
pub fn partition_k_classes(
    labels: &[usize],
    num_classes: usize,
    num_clients: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    check_clients(num_clients, labels.len())?;
    if k == 0 || k > num_classes {
        return Err(Error::Partition(format!("k = {k} infeasible for {num_classes} classes")));
    }
    if num_clients * k < num_classes {
        return Err(Error::Partition(format!(
            "{num_clients} clients x {k} classes cannot cover {num_classes} classes"
        )));
    }
    let by_class = class_indices(labels, num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut rng);
    let mut owners = vec![Vec::new(); num_classes];
    for c in 0..num_clients {
        for j in 0..k {
            owners[order[(c * k + j) % num_classes]].push(c);
        }
    }
    let mut assign = vec![Vec::new(); num_clients];
    for (class, idx) in by_class.iter().enumerate() {
        let own = &owners[class];
        if idx.len() < own.len() {
            return Err(Error::Partition(format!(
                "class {class} has {} samples for {} owners",
                idx.len(),
                own.len()
            )));
        }
        let mut idx = idx.clone();
        idx.shuffle(&mut rng);
        let counts = largest_remainder(idx.len(), &vec![1.0; own.len()]);
        let mut start = 0;
        for (&c, &n) in own.iter().zip(&counts) {
            assign[c].extend_from_slice(&idx[start..start + n]);
            start += n;
        }
    }
    if let Some(c) = assign.iter().position(Vec::is_empty) {
        return Err(Error::Partition(format!("client {c} would be empty")));
    }
    Ok(finish(assign, labels, num_classes))
}

/// Shard sizes proportional to `(rank + 1)^-s`, each filled from a
/// class-interleaved order so labels spread evenly.
pub fn partition_quantity_skew(
    labels: &[usize],
    num_classes: usize,
    num_clients: usize,
    skew_exponent: f64,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if num_clients < 2 {
        return Err(Error::Partition("quantity skew needs at least two clients".into()));
    }
    check_clients(num_clients, labels.len())?;
    let mut by_class = class_indices(labels, num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
    }
    // Stratified interleave: position t of class c is placed at its quantile.
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(labels.len());
    for (c, idx) in by_class.iter().enumerate() {
        for (t, &i) in idx.iter().enumerate() {
            keyed.push(((t as f64 + 0.5) / idx.len() as f64, c, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let weights: Vec<f64> = (0..num_clients).map(|i| ((i + 1) as f64).powf(-skew_exponent)).collect();
    let sizes = largest_remainder(labels.len(), &weights);
    if let Some(c) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Partition(format!("client {c} would be empty")));
    }
    // Contiguous runs of the interleaved order keep every shard's labels
    // balanced to within one sample per class.
    let mut assign = Vec::with_capacity(num_clients);
    let mut start = 0;
    for &n in &sizes {
        assign.push(keyed[start..start + n].iter().map(|k| k.2).collect());
        start += n;
    }
    Ok(finish(assign, labels, num_classes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionReport {
    pub histograms: Vec<Vec<usize>>,
    pub size_fractions: Vec<f64>,
    /// Pairwise total-variation distance between client label distributions.
    pub tv_distance: Vec<Vec<f64>>,
}

pub fn partition_stats(shards: &[ClientShard], labels: &[usize], num_classes: usize) -> PartitionReport {
    let histograms: Vec<Vec<usize>> = shards
        .iter()
        .map(|s| {
            let mut h = vec![0; num_classes];
            for &i in &s.indices {
                h[labels[i]] += 1;
            }
            h
        })
        .collect();
    let total: usize = shards.iter().map(ClientShard::len).sum();
    let size_fractions = shards.iter().map(|s| s.len() as f64 / total as f64).collect();
    let dist: Vec<Vec<f64>> = histograms
        .iter()
        .map(|h| {
            let n: usize = h.iter().sum();
            h.iter().map(|&c| c as f64 / n.max(1) as f64).collect()
        })
        .collect();
    let tv_distance = dist
        .iter()
        .map(|p| {
            dist.iter()
                .map(|q| 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
                .collect()
        })
        .collect();
    PartitionReport {
        histograms,
        size_fractions,
        tv_distance,
    }
}

/// Splits off the last `fraction` of each shard (in index order) as a
/// held-out pool. Returns `(training shards, held-out indices)`.
pub fn split_holdout(
    shards: &[ClientShard],
    labels: &[usize],
    num_classes: usize,
    fraction: f64,
) -> Result<(Vec<ClientShard>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::config(format!("holdout fraction must be in [0, 1), got {fraction}")));
    }
    let mut train = Vec::with_capacity(shards.len());
    let mut held = Vec::new();
    for s in shards {
        let n_hold = (s.len() as f64 * fraction).round() as usize;
        let keep = s.len() - n_hold;
        if keep == 0 {
            return Err(Error::Partition(format!("client {} has no training samples left", s.client_id)));
        }
        train.push(ClientShard::new(s.client_id, s.indices[..keep].to_vec(), labels, num_classes));
        held.extend_from_slice(&s.indices[keep..]);
    }
    held.sort_unstable();
    Ok((train, held))
}

/// One line per client: `client_id: i0 i1 ...` with sorted indices.
pub fn write_index_file(shards: &[ClientShard]) -> String {
    let mut out = String::new();
    for s in shards {
        let _ = write!(out, "{}:", s.client_id);
        for i in &s.indices {
            let _ = write!(out, " {i}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_index_file(text: &str) -> Result<Vec<(usize, Vec<usize>)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = || Error::config(format!("index file line {}: malformed `{line}`", n + 1));
            let (id, rest) = line.split_once(':').ok_or_else(bad)?;
            let id = id.trim().parse().map_err(|_| bad())?;
            let idx = rest
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad()))
                .collect::<Result<Vec<usize>>>()?;
            Ok((id, idx))
        })
        .collect()
}
