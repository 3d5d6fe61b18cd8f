use super::{
    aggregate, derive_seed, local_train, personalization_filter, Aggregation, ClientState, Controls, FedConfig,
    LocalUpdate, ServerState,
};
use crate::data::{ClientShard, Dataset};
use crate::dp::{check_dp_eligible, DpConfig, PrivacyLedger};
use crate::error::{Error, Result};
use crate::nn::{build_model, Model, ModelSpec};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Instant;

const PARTICIPATION_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    /// Mean per-class recall over classes present in the split.
    pub balanced_accuracy: f64,
}

/// Eval-mode loss and accuracy of `model` over `indices`.
pub fn evaluate(model: &Model, data: &Dataset, indices: &[usize], chunk: usize) -> Result<EvalMetrics> {
    if indices.is_empty() {
        return Err(Error::invalid("evaluate: empty index list"));
    }
    let k = data.num_classes;
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for part in indices.chunks(chunk.max(1)) {
        let (x, y) = data.gather(part)?;
        let logits = model.predict(&x, chunk)?;
        for (row, &label) in logits.data().chunks(k).zip(&y) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            let pred = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            counts[label] += 1;
            if pred == label {
                correct += 1;
                hits[label] += 1;
            }
        }
    }
    let n = indices.len() as f64;
    let present: Vec<f64> = (0..k)
        .filter(|&c| counts[c] > 0)
        .map(|c| hits[c] as f64 / counts[c] as f64)
        .collect();
    Ok(EvalMetrics {
        loss: loss / n,
        accuracy: correct as f64 / n,
        balanced_accuracy: present.iter().sum::<f64>() / present.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    /// 1-based round index.
    pub round: usize,
    /// Mean local training loss of each participating client.
    pub client_loss: Vec<(usize, f64)>,
    pub global: EvalMetrics,
    /// Each client's local model on its own evaluation split.
    pub client_eval: Vec<(usize, EvalMetrics)>,
    /// Mean over clients of the best local accuracy seen so far.
    pub best_local_accuracy: Option<f64>,
    /// Largest per-client ε spent so far under DP.
    pub epsilon: Option<f64>,
    pub wall_clock_secs: f64,
}

impl RoundMetrics {
    /// Copy with the wall-clock field zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        RoundMetrics {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}

pub struct FederationInput<'a> {
    pub data: &'a Dataset,
    /// Training shards, one per client, ordered by client id.
    pub shards: &'a [ClientShard],
    /// Held-out global evaluation indices.
    pub test: &'a [usize],
    /// Optional per-client evaluation indices for personalized reporting.
    pub client_test: Option<&'a [Vec<usize>]>,
}

#[derive(Debug, Clone)]
pub struct FederationResult {
    pub metrics: Vec<RoundMetrics>,
    pub initial: Model,
    pub global: Model,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
}

impl FederationResult {
    /// Global parameters combined with one client's personal parameters.
    pub fn local_model(&self, client: usize) -> Result<Model> {
        let mut m = self.global.clone();
        m.load(&self.clients[client].personal)?;
        Ok(m)
    }
}

fn participants(cfg: &FedConfig, num_clients: usize, round: usize) -> Vec<usize> {
    let m = cfg.clients_per_round(num_clients);
    if m == num_clients {
        return (0..num_clients).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[PARTICIPATION_STREAM, round as u64]));
    let mut v = index::sample(&mut rng, num_clients, m).into_vec();
    v.sort_unstable();
    v
}

/// Simulates `cfg.rounds` rounds of federated training. Results depend only
/// on the seeds, not on `cfg.workers`.
pub fn run_federation(
    spec: &ModelSpec,
    input: &FederationInput<'_>,
    cfg: &FedConfig,
    dp: Option<&DpConfig>,
) -> Result<FederationResult> {
    run_federation_with(spec, input, cfg, dp, |_, _| Ok(()))
}

/// As [`run_federation`], calling `on_round` after each round with its
/// metrics and the server state.
pub fn run_federation_with<F>(
    spec: &ModelSpec,
    input: &FederationInput<'_>,
    cfg: &FedConfig,
    dp: Option<&DpConfig>,
    mut on_round: F,
) -> Result<FederationResult>
where
    F: FnMut(&RoundMetrics, &ServerState) -> Result<()>,
{
    cfg.validate()?;
    spec.validate()?;
    let n = input.shards.len();
    if n == 0 {
        return Err(Error::invalid("federation needs at least one client"));
    }
    for (i, s) in input.shards.iter().enumerate() {
        if s.client_id != i {
            return Err(Error::invalid(format!("shard {i} has client id {}", s.client_id)));
        }
        if s.is_empty() {
            return Err(Error::invalid(format!("client {i} has an empty shard")));
        }
    }
    if let Some(ct) = input.client_test {
        if ct.len() != n {
            return Err(Error::invalid("client_test must list one split per client"));
        }
    }
    let template = build_model(spec, cfg.seed)?;
    let split = personalization_filter(cfg.aggregation.personalization(), &template)?;
    if let Some(dp) = dp {
        dp.validate()?;
        check_dp_eligible(&template)?;
    }
    let mut server = ServerState::new(template.params().clone());
    if cfg.aggregation == Aggregation::Scaffold {
        server.init_controls(&template.trainable_names(), n)?;
    }
    let mut clients: Vec<ClientState> = input
        .shards
        .iter()
        .map(|s| {
            let mut c = ClientState::new(s.clone());
            c.personal = split
                .personal
                .iter()
                .map(|p| (p.clone(), template.params()[p.as_str()].clone()))
                .collect();
            if let Some(ct) = input.client_test {
                c.test_indices = ct[s.client_id].clone();
            }
            c
        })
        .collect();
    if let Some(dp) = dp {
        for c in clients.iter_mut() {
            let q = (cfg.batch_size as f64 / c.shard.len() as f64).min(1.0);
            c.ledger = Some(PrivacyLedger::new(&dp.orders, q, dp.noise_multiplier)?);
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let mut metrics = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let start = Instant::now();
        let part = participants(cfg, n, round);
        let global = server.global.clone();
        let server_ref = &server;
        let updates: Vec<Result<LocalUpdate>> = pool.install(|| {
            clients
                .par_iter_mut()
                .filter(|c| part.binary_search(&c.client_id).is_ok())
                .map(|c| {
                    let controls = server_ref.control.as_ref().map(|sc| Controls {
                        server: sc,
                        client: &server_ref.client_controls[c.client_id],
                    });
                    local_train(&template, c, &global, &split, input.data, cfg, round, controls, dp)
                })
                .collect()
        });
        let updates = updates.into_iter().collect::<Result<Vec<_>>>()?;
        aggregate(&updates, cfg, &split, &mut server)?;
        let mut global_model = template.clone();
        global_model.load(&server.global)?;
        let global_eval = evaluate(&global_model, input.data, input.test, cfg.eval_batch)?;
        let mut client_eval = Vec::new();
        if input.client_test.is_some() {
            for c in clients.iter_mut() {
                if c.test_indices.is_empty() {
                    continue;
                }
                let mut local = global_model.clone();
                local.load(&c.personal)?;
                let e = evaluate(&local, input.data, &c.test_indices, cfg.eval_batch)?;
                if c.best_local.is_none_or(|b| e.accuracy > b.accuracy) {
                    c.best_local = Some(e);
                }
                client_eval.push((c.client_id, e));
            }
        }
        let bests: Vec<f64> = clients.iter().filter_map(|c| c.best_local.map(|b| b.accuracy)).collect();
        let epsilon = match dp {
            Some(dp) => {
                let mut worst: f64 = 0.0;
                for c in &clients {
                    let l = c.ledger.as_ref().expect("ledger set under dp");
                    worst = worst.max(l.epsilon(dp.delta_for(c.shard.len()))?.0);
                }
                Some(worst)
            }
            None => None,
        };
        let m = RoundMetrics {
            round,
            client_loss: updates.iter().map(|u| (u.client_id, u.mean_loss())).collect(),
            global: global_eval,
            client_eval,
            best_local_accuracy: (!bests.is_empty()).then(|| bests.iter().sum::<f64>() / bests.len() as f64),
            epsilon,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        let finite = m.global.loss.is_finite() && m.client_loss.iter().all(|(_, l)| l.is_finite());
        if !finite {
            return Err(Error::invalid(format!("non-finite metrics after round {round}")));
        }
        on_round(&m, &server)?;
        metrics.push(m);
    }
    let mut global = template.clone();
    global.load(&server.global)?;
    Ok(FederationResult {
        metrics,
        initial: template,
        global,
        clients,
        server,
    })
}

