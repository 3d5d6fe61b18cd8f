//! Round-based federated simulation: local training, aggregation
//! strategies and personalization.

mod aggregate;
mod local;
mod run;

pub use aggregate::{aggregate, aggregation_weights, personalization_filter, weighted_mean, ParamSplit, Personalization};
pub use local::{batch_gradients, local_train, sample_batch, Controls, LocalUpdate};
pub use run::{evaluate, run_federation, run_federation_with, EvalMetrics, FederationInput, FederationResult, RoundMetrics};

use crate::data::ClientShard;
use crate::dp::PrivacyLedger;
use crate::error::{Error, Result};
use crate::nn::NamedParams;
use crate::optim::{OptState, OptimizerConfig, SchedulerKind};
use crate::tensor::LossKind;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    FedAvg,
    FedProx,
    Scaffold,
    FedAdam,
    FedPer,
    FedBn,
}

impl Aggregation {
    pub const ALL: [Aggregation; 6] = [
        Aggregation::FedAvg,
        Aggregation::FedProx,
        Aggregation::Scaffold,
        Aggregation::FedAdam,
        Aggregation::FedPer,
        Aggregation::FedBn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::FedAvg => "fedavg",
            Aggregation::FedProx => "fedprox",
            Aggregation::Scaffold => "scaffold",
            Aggregation::FedAdam => "fedadam",
            Aggregation::FedPer => "fedper",
            Aggregation::FedBn => "fedbn",
        }
    }

    pub fn personalization(self) -> Personalization {
        match self {
            Aggregation::FedPer => Personalization::FedPer,
            Aggregation::FedBn => Personalization::FedBn,
            _ => Personalization::None,
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Aggregation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown aggregation `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainLoss {
    CrossEntropy,
    Focal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub scheduler: SchedulerKind,
    pub aggregation: Aggregation,
    pub prox_mu: f64,
    pub server_lr: f64,
    pub server_beta1: f64,
    pub server_beta2: f64,
    pub server_eps: f64,
    pub participation: f64,
    pub loss: TrainLoss,
    pub focal_gamma: f64,
    /// Threads used for concurrent client training.
    pub workers: usize,
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            rounds: 30,
            local_steps: 10,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            scheduler: SchedulerKind::Constant,
            aggregation: Aggregation::FedAvg,
            prox_mu: 0.01,
            server_lr: 0.01,
            server_beta1: 0.9,
            server_beta2: 0.99,
            server_eps: 1e-3,
            participation: 1.0,
            loss: TrainLoss::CrossEntropy,
            focal_gamma: 2.0,
            workers: 1,
            eval_batch: 256,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.prox_mu >= 0.0 && self.prox_mu.is_finite()) {
            return Err(Error::config(format!("prox_mu must be >= 0, got {}", self.prox_mu)));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config(format!(
                "participation must be in (0, 1], got {}",
                self.participation
            )));
        }
        if !(self.server_lr > 0.0) || !(self.server_eps > 0.0) {
            return Err(Error::config("server_lr and server_eps must be > 0"));
        }
        if !(0.0..1.0).contains(&self.server_beta1) || !(0.0..1.0).contains(&self.server_beta2) {
            return Err(Error::config("server betas must be in [0, 1)"));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::config("focal_gamma must be >= 0"));
        }
        if self.workers == 0 || self.eval_batch == 0 {
            return Err(Error::config("workers and eval_batch must be >= 1"));
        }
        Ok(())
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.loss {
            TrainLoss::CrossEntropy => LossKind::CrossEntropy,
            TrainLoss::Focal => LossKind::Focal {
                gamma: self.focal_gamma,
            },
        }
    }

    /// Clients sampled per round; at least one.
    pub fn clients_per_round(&self, num_clients: usize) -> usize {
        let m = (self.participation * num_clients as f64 - 1e-9).ceil() as usize;
        m.clamp(1, num_clients.max(1))
    }
}

/// Mixes a base seed with stream identifiers (SplitMix64 finalizer).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub shard: ClientShard,
    /// Local evaluation split for personalized reporting.
    pub test_indices: Vec<usize>,
    /// Parameters kept private to this client.
    pub personal: NamedParams,
    pub optimizer: OptState,
    /// Local steps taken so far; the scheduler position.
    pub sched_step: usize,
    /// Random stream for batch sampling; defaults to the client id.
    pub rng_stream: u64,
    pub ledger: Option<PrivacyLedger>,
    pub best_local: Option<EvalMetrics>,
}

impl ClientState {
    pub fn new(shard: ClientShard) -> Self {
        ClientState {
            client_id: shard.client_id,
            rng_stream: shard.client_id as u64,
            shard,
            test_indices: Vec::new(),
            personal: NamedParams::new(),
            optimizer: OptState::default(),
            sched_step: 0,
            ledger: None,
            best_local: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global: NamedParams,
    pub round: usize,
    /// Server control variate (SCAFFOLD).
    pub control: Option<NamedParams>,
    /// Per-client control variates (SCAFFOLD), indexed by client id.
    pub client_controls: Vec<NamedParams>,
    /// Server Adam moments (FedAdam).
    pub adam_m: Option<NamedParams>,
    pub adam_v: Option<NamedParams>,
}

impl ServerState {
    pub fn new(global: NamedParams) -> Self {
        ServerState {
            global,
            round: 0,
            control: None,
            client_controls: Vec::new(),
            adam_m: None,
            adam_v: None,
        }
    }

    /// Zero control variates over `names` for `num_clients` clients.
    pub fn init_controls(&mut self, names: &[String], num_clients: usize) -> Result<()> {
        let mut zero = NamedParams::new();
        for n in names {
            let t = self.global.get(n).ok_or_else(|| Error::Parameter {
                name: n.clone(),
                reason: "not a global parameter".into(),
            })?;
            zero.insert(n.clone(), crate::tensor::Tensor::zeros(t.dims())?);
        }
        self.client_controls = vec![zero.clone(); num_clients];
        self.control = Some(zero);
        Ok(())
    }
}
