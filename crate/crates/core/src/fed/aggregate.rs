use super::{Aggregation, FedConfig, LocalUpdate, ServerState};
use crate::error::{Error, Result};
use crate::nn::{Model, NamedParams, ParamGroup};
use crate::stats::compensated_sum;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Personalization {
    None,
    FedPer,
    FedBn,
}

/// Partition of a model's parameter names for aggregation.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParamSplit {
    pub shared: Vec<String>,
    pub personal: Vec<String>,
    /// Shared names that carry no gradient (running statistics); FedAdam
    /// averages these instead of stepping them.
    pub buffers: Vec<String>,
}

impl ParamSplit {
    pub fn all_shared(names: impl IntoIterator<Item = String>) -> Self {
        ParamSplit {
            shared: names.into_iter().collect(),
            ..Default::default()
        }
    }

    pub fn is_personal(&self, name: &str) -> bool {
        self.personal.iter().any(|n| n == name)
    }
}

pub fn personalization_filter(strategy: Personalization, model: &Model) -> Result<ParamSplit> {
    if strategy == Personalization::FedBn && !model.has_batch_norm() {
        return Err(Error::config(format!(
            "fedbn is only applicable to models with batch-norm layers, not {}",
            model.spec().architecture
        )));
    }
    let mut split = ParamSplit::default();
    for (name, info) in model.info() {
        let personal = match strategy {
            Personalization::None => false,
            Personalization::FedPer => info.group == ParamGroup::Classifier,
            Personalization::FedBn => info.group == ParamGroup::Norm,
        };
        if personal {
            split.personal.push(name.clone());
        } else {
            split.shared.push(name.clone());
            if !info.trainable {
                split.buffers.push(name.clone());
            }
        }
    }
    Ok(split)
}

/// `n_i / N` with the last weight set so the vector sums to one under
/// compensated summation.
pub fn aggregation_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    let total: usize = sizes.iter().sum();
    if sizes.is_empty() || total == 0 {
        return Err(Error::invalid("aggregation needs at least one non-empty update"));
    }
    let mut w: Vec<f64> = sizes.iter().map(|&n| n as f64 / total as f64).collect();
    let k = w.len();
    w[k - 1] = 1.0 - compensated_sum(w[..k - 1].iter().copied());
    Ok(w)
}

/// `x_0 + Σ w_i (x_i − x_0)`: the weighted mean, exact for identical inputs.
pub fn weighted_mean(values: &[&Tensor], weights: &[f64]) -> Tensor {
    let mut out = values[0].clone();
    let x0 = values[0].data();
    for (v, &w) in values.iter().zip(weights).skip(1) {
        for ((o, &x), &a) in out.data_mut().iter_mut().zip(v.data()).zip(x0) {
            *o += w * (x - a);
        }
    }
    out
}

fn gather<'a>(updates: &'a [LocalUpdate], name: &str) -> Result<Vec<&'a Tensor>> {
    let first = updates[0].params.get(name).ok_or_else(|| Error::Parameter {
        name: name.to_string(),
        reason: "missing from client update".into(),
    })?;
    let mut out = vec![first];
    for u in &updates[1..] {
        let t = u.params.get(name).ok_or_else(|| Error::Parameter {
            name: name.to_string(),
            reason: format!("missing from client {} update", u.client_id),
        })?;
        if t.dims() != first.dims() {
            return Err(Error::Parameter {
                name: name.to_string(),
                reason: format!("client {} shape {:?} vs {:?}", u.client_id, t.dims(), first.dims()),
            });
        }
        out.push(t);
    }
    Ok(out)
}

/// Combines client updates into the server's global parameters. Updates
/// are reduced in the order given; callers pass them sorted by client id.
pub fn aggregate(updates: &[LocalUpdate], cfg: &FedConfig, split: &ParamSplit, server: &mut ServerState) -> Result<()> {
    if updates.is_empty() {
        return Err(Error::invalid("aggregate: no client updates"));
    }
    let sizes: Vec<usize> = updates.iter().map(|u| u.num_samples).collect();
    let w = aggregation_weights(&sizes)?;
    let mut means = NamedParams::new();
    for name in &split.shared {
        let vals = gather(updates, name)?;
        if let Some(g) = server.global.get(name) {
            if g.dims() != vals[0].dims() {
                return Err(Error::Parameter {
                    name: name.clone(),
                    reason: format!("update shape {:?} vs global {:?}", vals[0].dims(), g.dims()),
                });
            }
        }
        means.insert(name.clone(), weighted_mean(&vals, &w));
    }
    if cfg.aggregation == Aggregation::FedAdam {
        fedadam_step(cfg, split, server, means)?;
    } else {
        for (name, t) in means {
            server.global.insert(name, t);
        }
    }
    if cfg.aggregation == Aggregation::Scaffold {
        update_controls(updates, server)?;
    }
    server.round += 1;
    Ok(())
}

fn fedadam_step(cfg: &FedConfig, split: &ParamSplit, server: &mut ServerState, means: NamedParams) -> Result<()> {
    let m = server.adam_m.get_or_insert_with(NamedParams::new);
    let v = server.adam_v.get_or_insert_with(NamedParams::new);
    for (name, mean) in means {
        if split.buffers.contains(&name) {
            server.global.insert(name, mean);
            continue;
        }
        let theta = server.global.get_mut(&name).ok_or_else(|| Error::Parameter {
            name: name.clone(),
            reason: "not a global parameter".into(),
        })?;
        let mm = m.entry(name.clone()).or_insert(Tensor::zeros(theta.dims())?);
        let vv = v.entry(name.clone()).or_insert(Tensor::zeros(theta.dims())?);
        for (((t, &a), mi), vi) in theta
            .data_mut()
            .iter_mut()
            .zip(mean.data())
            .zip(mm.data_mut())
            .zip(vv.data_mut())
        {
            let g = *t - a;
            *mi = cfg.server_beta1 * *mi + (1.0 - cfg.server_beta1) * g;
            *vi = cfg.server_beta2 * *vi + (1.0 - cfg.server_beta2) * g * g;
            *t -= cfg.server_lr * *mi / (vi.sqrt() + cfg.server_eps);
        }
    }
    Ok(())
}

fn update_controls(updates: &[LocalUpdate], server: &mut ServerState) -> Result<()> {
    if server.control.is_none() {
        return Err(Error::invalid("scaffold server state has no control variates"));
    }
    for u in updates {
        let delta = u.control_delta.as_ref().ok_or_else(|| {
            Error::invalid(format!("scaffold update from client {} lacks a control delta", u.client_id))
        })?;
        let ci = server
            .client_controls
            .get_mut(u.client_id)
            .ok_or_else(|| Error::invalid(format!("no control variate for client {}", u.client_id)))?;
        for (name, d) in delta {
            let t = ci.get_mut(name).ok_or_else(|| Error::Parameter {
                name: name.clone(),
                reason: "not a control-variate entry".into(),
            })?;
            for (x, dx) in t.data_mut().iter_mut().zip(d.data()) {
                *x += dx;
            }
        }
    }
    let n = server.client_controls.len();
    let w = vec![1.0 / n as f64; n];
    let c = server.control.as_mut().expect("checked above");
    for (name, t) in c.iter_mut() {
        let vals: Vec<&Tensor> = server.client_controls.iter().map(|ci| &ci[name.as_str()]).collect();
        *t = weighted_mean(&vals, &w);
    }
    Ok(())
}
