use super::{derive_seed, Aggregation, ClientState, FedConfig, ParamSplit};
use crate::data::{labels_tensor, Dataset};
use crate::dp::{private_gradient, DpConfig};
use crate::error::{Error, Result};
use crate::nn::{Mode, Model, NamedParams};
use crate::optim::{optimizer_step, scheduled_lr};
use crate::tensor::{LossKind, Tape, Tensor};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Result of one client's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub client_id: usize,
    pub params: NamedParams,
    pub num_samples: usize,
    /// SCAFFOLD control-variate change `c_i⁺ − c_i`.
    pub control_delta: Option<NamedParams>,
    /// Training loss of each local step.
    pub losses: Vec<f64>,
}

impl LocalUpdate {
    pub fn new(client_id: usize, params: NamedParams, num_samples: usize) -> Self {
        LocalUpdate {
            client_id,
            params,
            num_samples,
            control_delta: None,
            losses: Vec::new(),
        }
    }

    pub fn mean_loss(&self) -> f64 {
        if self.losses.is_empty() {
            return 0.0;
        }
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

/// SCAFFOLD server and client control variates.
#[derive(Debug, Clone, Copy)]
pub struct Controls<'a> {
    pub server: &'a NamedParams,
    pub client: &'a NamedParams,
}

/// Draws `batch_size` distinct shard positions (the whole shard, shuffled,
/// when it is smaller) and maps them to sample indices.
pub fn sample_batch<R: Rng + ?Sized>(indices: &[usize], batch_size: usize, rng: &mut R) -> Vec<usize> {
    let n = batch_size.min(indices.len());
    index::sample(rng, indices.len(), n).into_iter().map(|p| indices[p]).collect()
}

/// Mean loss and gradients of a train-mode forward over `batch`; running
/// statistics are committed to `model`.
pub fn batch_gradients(model: &mut Model, data: &Dataset, batch: &[usize], loss: LossKind) -> Result<(f64, NamedParams)> {
    let (x, y) = data.gather(batch)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let xv = tape.constant(x);
    let fwd = model.forward(&mut tape, &bound, xv, Mode::Train)?;
    let l = tape.loss(fwd.logits, &labels_tensor(&y)?, loss, None)?;
    let value = tape.value(l).item();
    tape.backward(l)?;
    let grads = bound.grads(&tape);
    model.commit(&fwd.bn_updates)?;
    Ok((value, grads))
}

fn add_scaled(g: &mut Tensor, a: &Tensor, b: &Tensor, scale: f64) {
    for ((gi, &ai), &bi) in g.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *gi += scale * (ai - bi);
    }
}

/// Runs `cfg.local_steps` optimizer steps on the client's shard starting
/// from `global`, with the client's personal parameters restored first.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    template: &Model,
    client: &mut ClientState,
    global: &NamedParams,
    split: &ParamSplit,
    data: &Dataset,
    cfg: &FedConfig,
    round: usize,
    controls: Option<Controls<'_>>,
    dp: Option<&DpConfig>,
) -> Result<LocalUpdate> {
    if client.shard.is_empty() {
        return Err(Error::invalid(format!("client {} has an empty shard", client.client_id)));
    }
    let mut model = template.clone();
    model.load(global)?;
    if !client.personal.is_empty() {
        model.load(&client.personal)?;
    }
    if cfg.aggregation == Aggregation::Scaffold && controls.is_none() {
        return Err(Error::invalid("scaffold local training needs control variates"));
    }
    let loss_kind = cfg.loss_kind();
    let total_steps = cfg.rounds * cfg.local_steps;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[client.rng_stream, round as u64]));
    let mut losses = Vec::with_capacity(cfg.local_steps);
    let mut lr_sum = 0.0;
    for step in 0..cfg.local_steps {
        let batch = sample_batch(&client.shard.indices, cfg.batch_size, &mut rng);
        let lr = scheduled_lr(cfg.scheduler, cfg.optimizer.lr, client.sched_step, total_steps);
        let (loss, mut grads) = match dp {
            None => batch_gradients(&mut model, data, &batch, loss_kind)?,
            Some(dp) => {
                let noise_seed = rng.random();
                private_gradient(&model, data, &batch, loss_kind, dp, noise_seed)?
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                client: client.client_id,
                round,
                step,
            });
        }
        if cfg.aggregation == Aggregation::FedProx && cfg.prox_mu > 0.0 {
            for (name, g) in grads.iter_mut() {
                if let Some(anchor) = global.get(name) {
                    add_scaled(g, &model.params()[name.as_str()], anchor, cfg.prox_mu);
                }
            }
        }
        if let Some(c) = controls {
            for (name, g) in grads.iter_mut() {
                if let (Some(cs), Some(ci)) = (c.server.get(name), c.client.get(name)) {
                    add_scaled(g, cs, ci, 1.0);
                }
            }
        }
        optimizer_step(model.params_mut(), &grads, &cfg.optimizer, lr, &mut client.optimizer)?;
        if let Some(ledger) = client.ledger.as_mut() {
            ledger.step();
        }
        client.sched_step += 1;
        lr_sum += lr;
        losses.push(loss);
    }
    let control_delta = match controls {
        Some(c) => {
            // Option II: c_i⁺ = c_i − c + (θ_global − θ_i) / Σ lr.
            let mut delta = NamedParams::new();
            for (name, cs) in c.server {
                let mut d = Tensor::zeros(cs.dims())?;
                if lr_sum > 0.0 {
                    let (g, th) = (&global[name.as_str()], &model.params()[name.as_str()]);
                    for (((di, &s), &gv), &tv) in d.data_mut().iter_mut().zip(cs.data()).zip(g.data()).zip(th.data()) {
                        *di = (gv - tv) / lr_sum - s;
                    }
                }
                delta.insert(name.clone(), d);
            }
            Some(delta)
        }
        None => None,
    };
    client.personal = split
        .personal
        .iter()
        .map(|n| (n.clone(), model.params()[n.as_str()].clone()))
        .collect();
    let params = model.params().clone();
    Ok(LocalUpdate {
        client_id: client.client_id,
        params,
        num_samples: client.shard.len(),
        control_delta,
        losses,
    })
}
