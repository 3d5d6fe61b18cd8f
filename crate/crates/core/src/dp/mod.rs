//! Sample-level DP-SGD: per-sample clipping, Gaussian noising and
//! Rényi-DP accounting.

mod rdp;

pub use rdp::{default_orders, rdp_epsilon, rdp_subsampled_gaussian, PrivacyLedger};

use crate::data::{labels_tensor, Dataset};
use crate::error::{Error, Result};
use crate::nn::{Mode, Model, NamedParams};
use crate::optim::{optimizer_step, OptState, OptimizerConfig};
use crate::tensor::{LossKind, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpConfig {
    /// Per-sample L2 clipping bound; `inf` disables clipping.
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    /// Target δ; when unset each client uses `0.1 / |D_i|`.
    pub delta: Option<f64>,
    pub orders: Vec<f64>,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            clip_norm: 1.0,
            noise_multiplier: 1.1,
            delta: None,
            orders: default_orders(),
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("dp clip_norm must be > 0"));
        }
        if !(self.noise_multiplier > 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::config("dp noise_multiplier must be > 0"));
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::config(format!("dp delta {d} outside (0, 1)")));
            }
        }
        if self.orders.is_empty() || self.orders.iter().any(|&a| !(a > 1.0 && a.is_finite())) {
            return Err(Error::config("dp orders must be non-empty, finite and > 1"));
        }
        Ok(())
    }

    pub fn delta_for(&self, dataset_size: usize) -> f64 {
        self.delta.unwrap_or(0.1 / dataset_size.max(1) as f64)
    }

    /// Standard deviation of the noise added to the clipped sum. With
    /// clipping disabled the sensitivity is taken as 1.
    pub fn noise_std(&self) -> f64 {
        if self.clip_norm.is_finite() {
            self.noise_multiplier * self.clip_norm
        } else {
            self.noise_multiplier
        }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales each gradient by `min(1, C/‖g‖)` and sums.
pub fn clip_per_sample(grads: &[Vec<f64>], clip_norm: f64) -> Vec<f64> {
    let dim = grads.first().map_or(0, Vec::len);
    let mut sum = vec![0.0; dim];
    for g in grads {
        assert_eq!(g.len(), dim, "per-sample gradients must share a length");
        let norm = l2(g);
        let factor = if norm > clip_norm { clip_norm / norm } else { 1.0 };
        for (s, x) in sum.iter_mut().zip(g) {
            *s += factor * x;
        }
    }
    sum
}

/// `(sum + N(0, σ² I)) / batch_size` with `σ = z·C`, seeded.
pub fn noise_and_average(clipped_sum: &[f64], noise_std: f64, batch_size: usize, seed: u64) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::Privacy("batch size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = batch_size as f64;
    Ok(clipped_sum
        .iter()
        .map(|s| {
            let n: f64 = StandardNormal.sample(&mut rng);
            (s + noise_std * n) / b
        })
        .collect())
}

fn flatten(grads: &NamedParams) -> Vec<f64> {
    grads.values().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(like: &NamedParams, flat: &[f64]) -> Result<NamedParams> {
    let mut out = NamedParams::new();
    let mut at = 0;
    for (name, t) in like {
        let n = t.numel();
        out.insert(name.clone(), Tensor::from_vec(t.dims(), flat[at..at + n].to_vec())?);
        at += n;
    }
    Ok(out)
}

pub fn check_dp_eligible(model: &Model) -> Result<()> {
    if model.has_batch_norm() {
        return Err(Error::Privacy(format!(
            "{} uses batch normalization, whose batch statistics mix samples and break sample-level privacy",
            model.spec().architecture
        )));
    }
    Ok(())
}

/// Noisy mean gradient of a batch from per-sample backward passes.
/// Returns the mean (unclipped) loss and the privatized gradient.
pub fn private_gradient(
    model: &Model,
    data: &Dataset,
    batch: &[usize],
    loss: LossKind,
    dp: &DpConfig,
    noise_seed: u64,
) -> Result<(f64, NamedParams)> {
    check_dp_eligible(model)?;
    let mut per_sample = Vec::with_capacity(batch.len());
    let mut total_loss = 0.0;
    let mut template = None;
    for &i in batch {
        let (x, y) = data.gather(&[i])?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let xv = tape.constant(x);
        let fwd = model.forward(&mut tape, &bound, xv, Mode::Train)?;
        let l = tape.loss(fwd.logits, &labels_tensor(&y)?, loss, None)?;
        total_loss += tape.value(l).item();
        tape.backward(l)?;
        let g = bound.grads(&tape);
        per_sample.push(flatten(&g));
        template.get_or_insert(g);
    }
    let template = template.ok_or_else(|| Error::Privacy("empty batch".into()))?;
    let sum = clip_per_sample(&per_sample, dp.clip_norm);
    let noisy = noise_and_average(&sum, dp.noise_std(), batch.len(), noise_seed)?;
    Ok((total_loss / batch.len() as f64, unflatten(&template, &noisy)?))
}

/// One DP-SGD step: private gradient, optimizer update, ledger advance.
#[allow(clippy::too_many_arguments)]
pub fn dp_local_step(
    model: &mut Model,
    data: &Dataset,
    batch: &[usize],
    loss: LossKind,
    optimizer: &OptimizerConfig,
    lr: f64,
    state: &mut OptState,
    dp: &DpConfig,
    ledger: &mut PrivacyLedger,
    noise_seed: u64,
) -> Result<f64> {
    let (l, g) = private_gradient(model, data, batch, loss, dp, noise_seed)?;
    optimizer_step(model.params_mut(), &g, optimizer, lr, state)?;
    ledger.step();
    Ok(l)
}
