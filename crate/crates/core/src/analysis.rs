//! Class selectivity and channel-attention statistics of trained models.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Mode, Model};
use crate::stats::{mean_std, skewness};
use crate::tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt;

pub const CSI_BINS: usize = 64;
pub const DENSITY_POINTS: usize = 128;
/// Half-width of the band within which all attention means count as one value.
pub const DEGENERACY_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbePosition {
    PreAttention,
    PostAttention,
}

impl fmt::Display for ProbePosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbePosition::PreAttention => "pre_attention",
            ProbePosition::PostAttention => "post_attention",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PreFl,
    PostFl,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::PreFl => "pre_fl",
            Phase::PostFl => "post_fl",
        })
    }
}

/// Spatially averaged activations `[B, C]` at one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeActivation {
    pub layer: String,
    pub position: ProbePosition,
    pub values: Tensor,
}

/// Anything that maps a batch to probe activations.
pub trait ProbeSource {
    fn probe(&self, x: &Tensor) -> Result<Vec<ProbeActivation>>;
}

impl ProbeSource for Model {
    fn probe(&self, x: &Tensor) -> Result<Vec<ProbeActivation>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let fwd = self.forward(&mut tape, &bound, xv, Mode::Eval)?;
        let names = self.block_names();
        let mut out = Vec::with_capacity(2 * fwd.probes.len());
        for p in &fwd.probes {
            for (position, var) in [
                (ProbePosition::PreAttention, p.pre_attention),
                (ProbePosition::PostAttention, p.post_attention),
            ] {
                let pooled = tape.global_avg_pool(var)?;
                out.push(ProbeActivation {
                    layer: names[p.block].clone(),
                    position,
                    values: tape.value(pooled).clone(),
                });
            }
        }
        Ok(out)
    }
}

/// Class-conditional mean activations `means[class][neuron]` at one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbePoint {
    pub layer: String,
    pub position: ProbePosition,
    pub means: Vec<Vec<f64>>,
}

impl ProbePoint {
    pub fn num_neurons(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Class means of one neuron.
    pub fn neuron(&self, j: usize) -> Vec<f64> {
        self.means.iter().map(|row| row[j]).collect()
    }
}

/// Per-class means of spatially averaged activations at every probe, over
/// the samples in `indices`, processed in chunks of `chunk`.
pub fn capture_class_conditional<S: ProbeSource + ?Sized>(
    source: &S,
    data: &Dataset,
    indices: &[usize],
    chunk: usize,
) -> Result<Vec<ProbePoint>> {
    let k = data.num_classes;
    let mut counts = vec![0usize; k];
    for &i in indices {
        counts[*data.labels.get(i).ok_or_else(|| Error::Analysis(format!("index {i} out of range")))?] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Analysis(format!("class {c} has no samples")));
    }
    let mut sums: Vec<(String, ProbePosition, Vec<Vec<f64>>)> = Vec::new();
    for part in indices.chunks(chunk.max(1)) {
        let (x, y) = data.gather(part)?;
        let acts = source.probe(&x)?;
        if sums.is_empty() {
            sums = acts
                .iter()
                .map(|a| (a.layer.clone(), a.position, vec![vec![0.0; a.values.dims()[1]]; k]))
                .collect();
        }
        if acts.len() != sums.len() {
            return Err(Error::Analysis("probe count changed between batches".into()));
        }
        for (a, (_, _, s)) in acts.iter().zip(sums.iter_mut()) {
            let c = a.values.dims()[1];
            for (row, &label) in a.values.data().chunks(c).zip(&y) {
                for (acc, v) in s[label].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(layer, position, s)| ProbePoint {
            layer,
            position,
            means: s
                .into_iter()
                .zip(&counts)
                .map(|(row, &n)| row.into_iter().map(|v| v / n as f64).collect())
                .collect(),
        })
        .collect())
}

/// Class selectivity index `(μ_max − μ_rest)/(μ_max + μ_rest)`, where
/// `μ_rest` is the mean over the other classes. A zero denominator gives 0.
pub fn csi(mu: &[f64]) -> f64 {
    assert!(mu.len() >= 2, "csi needs at least two classes");
    let (arg, &max) = mu
        .iter()
        .enumerate()
        .fold((0, &mu[0]), |best, (i, v)| if *v > *best.1 { (i, v) } else { best });
    let rest = mu
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, v)| v)
        .sum::<f64>()
        / (mu.len() - 1) as f64;
    let den = max + rest;
    if den == 0.0 {
        0.0
    } else {
        (max - rest) / den
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsiRecord {
    pub model: String,
    pub phase: Phase,
    pub layer: String,
    pub position: ProbePosition,
    /// One value per neuron (channel).
    pub values: Vec<f64>,
}

pub fn csi_records(points: &[ProbePoint], model: &str, phase: Phase) -> Vec<CsiRecord> {
    points
        .iter()
        .map(|p| CsiRecord {
            model: model.to_string(),
            phase,
            layer: p.layer.clone(),
            position: p.position,
            values: (0..p.num_neurons()).map(|j| csi(&p.neuron(j))).collect(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsiDistribution {
    /// Counts over `CSI_BINS` equal bins on [0, 1]; 1.0 falls in the last bin.
    pub histogram: Vec<usize>,
    /// Gaussian kernel density at `DENSITY_POINTS` evenly spaced points.
    pub density: Vec<(f64, f64)>,
    pub bandwidth: f64,
    pub skewness: f64,
    pub n: usize,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Silverman's rule `0.9·min(σ, IQR/1.34)·n^(−1/5)`, floored for
/// degenerate samples.
pub fn silverman_bandwidth(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let (_, sd) = mean_std(xs);
    let iqr = quantile(&s, 0.75) - quantile(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * (xs.len() as f64).powf(-0.2);
    if h > 0.0 {
        h
    } else {
        1.0 / CSI_BINS as f64
    }
}

pub fn csi_distribution(values: &[f64]) -> Result<CsiDistribution> {
    if values.is_empty() {
        return Err(Error::Analysis("csi_distribution: no values".into()));
    }
    let mut histogram = vec![0usize; CSI_BINS];
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) * CSI_BINS as f64) as usize).min(CSI_BINS - 1);
        histogram[b] += 1;
    }
    let h = silverman_bandwidth(values);
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let density = (0..DENSITY_POINTS)
        .map(|i| {
            let x = i as f64 / (DENSITY_POINTS - 1) as f64;
            let f = values.iter().map(|v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum::<f64>() * norm;
            (x, f)
        })
        .collect();
    Ok(CsiDistribution {
        histogram,
        density,
        bandwidth: h,
        skewness: skewness(values),
        n: values.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: String,
    /// Mean gate `S̄[class][channel]`.
    pub class_means: Vec<Vec<f64>>,
    /// Population std of `S̄` over (class, channel).
    pub variability: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSummary {
    pub records: Vec<AttentionRecord>,
    /// Every mean gate of every layer lies within the tolerance band of one
    /// value.
    pub degenerate: bool,
}

fn within_band(values: impl Iterator<Item = f64> + Clone) -> bool {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    hi - lo <= 2.0 * DEGENERACY_TOLERANCE
}

/// Per-layer class-conditional mean channel gates.
pub fn attention_stats(model: &Model, data: &Dataset, indices: &[usize], chunk: usize) -> Result<AttentionSummary> {
    if !model.has_attention() {
        return Err(Error::Analysis(format!(
            "{} has no channel-attention blocks",
            model.spec().architecture
        )));
    }
    let k = data.num_classes;
    let mut counts = vec![0usize; k];
    for &i in indices {
        counts[data.labels[i]] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Analysis(format!("class {c} has no samples")));
    }
    let names = model.block_names();
    let mut sums: Vec<Vec<Vec<f64>>> = Vec::new();
    for part in indices.chunks(chunk.max(1)) {
        let (x, y) = data.gather(part)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let xv = tape.constant(x);
        let fwd = model.forward(&mut tape, &bound, xv, Mode::Eval)?;
        if sums.is_empty() {
            sums = fwd
                .attention
                .iter()
                .map(|&g| vec![vec![0.0; tape.value(g).dims()[1]]; k])
                .collect();
        }
        for (&g, s) in fwd.attention.iter().zip(sums.iter_mut()) {
            let t = tape.value(g);
            let c = t.dims()[1];
            for (row, &label) in t.data().chunks(c).zip(&y) {
                for (acc, v) in s[label].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
    }
    let records: Vec<AttentionRecord> = sums
        .into_iter()
        .enumerate()
        .map(|(b, s)| {
            let class_means: Vec<Vec<f64>> = s
                .into_iter()
                .zip(&counts)
                .map(|(row, &n)| row.into_iter().map(|v| v / n as f64).collect())
                .collect();
            let flat: Vec<f64> = class_means.iter().flatten().copied().collect();
            AttentionRecord {
                layer: names[b].clone(),
                variability: mean_std(&flat).1,
                degenerate: within_band(flat.iter().copied()),
                class_means,
            }
        })
        .collect();
    let degenerate = within_band(records.iter().flat_map(|r| r.class_means.iter().flatten().copied()));
    Ok(AttentionSummary { records, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_csi_hand_values() {
        assert_eq!(csi(&[1.0, 0.0, 0.0]), 1.0);
        assert_eq!(csi(&[0.3, 0.3, 0.3]), 0.0);
        assert_eq!(csi(&[0.75, 0.25, 0.25]), 0.5);
        assert_eq!(csi(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn test_histogram_edges() {
        let d = csi_distribution(&[1.0; 10]).unwrap();
        assert_eq!(d.histogram[CSI_BINS - 1], 10);
        assert_eq!(d.histogram.iter().sum::<usize>(), 10);
        let d = csi_distribution(&[0.0, 0.5]).unwrap();
        assert_eq!(d.histogram[0], 1);
        assert_eq!(d.histogram[CSI_BINS / 2], 1);
        assert!(csi_distribution(&[]).is_err());
    }

    #[test]
    fn test_density_integrates_near_one_inside_support() {
        let xs: Vec<f64> = (0..200).map(|i| 0.3 + 0.4 * (i as f64 / 199.0)).collect();
        let d = csi_distribution(&xs).unwrap();
        let dx = 1.0 / (DENSITY_POINTS - 1) as f64;
        let area: f64 = d.density.iter().map(|p| p.1).sum::<f64>() * dx;
        assert!((area - 1.0).abs() < 0.02, "{area}");
    }

    struct Stub;

    impl ProbeSource for Stub {
        fn probe(&self, x: &Tensor) -> Result<Vec<ProbeActivation>> {
            let b = x.dims()[0];
            Ok(vec![ProbeActivation {
                layer: "stub".into(),
                position: ProbePosition::PostAttention,
                values: Tensor::full(&[b, 3], 0.5)?,
            }])
        }
    }

    #[test]
    fn test_constant_stub_means_identical() {
        let ds = Dataset::new(Tensor::zeros(&[4, 1, 2, 2]).unwrap(), vec![0, 1, 0, 1], 2, 0).unwrap();
        let pts = capture_class_conditional(&Stub, &ds, &[0, 1, 2, 3], 3).unwrap();
        assert_eq!(pts[0].means, vec![vec![0.5; 3], vec![0.5; 3]]);
        assert!(capture_class_conditional(&Stub, &ds, &[0, 2], 3).is_err());
    }
}
