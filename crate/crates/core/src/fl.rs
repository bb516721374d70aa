//! Federated rounds: local training on clients and server-side aggregation.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::metrics::{self, CostLedger, RoundMetrics};
use crate::nn::{self, ModelParams};
use crate::sampling::SamplingPlan;
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAvg,
    FedProx,
    Scaffold,
    FedNova,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
            Algorithm::Scaffold => "scaffold",
            Algorithm::FedNova => "fednova",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Algorithm::FedAvg),
            "fedprox" => Ok(Algorithm::FedProx),
            "scaffold" => Ok(Algorithm::Scaffold),
            "fednova" => Ok(Algorithm::FedNova),
            other => Err(Error::invalid(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// Denominator of the size-weighted average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDenominator {
    /// Sum of the sampled clients' sizes; weights sum to one.
    #[default]
    SampledSum,
    /// Size of the full training set; weights sum to the sampled fraction.
    Global,
}

/// One client's private data and persistent state.
#[derive(Debug, Clone)]
pub struct ClientState {
    id: usize,
    indices: Vec<usize>,
    local: Dataset,
    /// Parameters from this client's most recent local training.
    pub params: Option<ModelParams>,
    /// SCAFFOLD client control variate.
    pub control_variate: Option<Vec<f64>>,
    pub cluster: Option<usize>,
    pub local_steps_taken: usize,
}

impl ClientState {
    pub fn new(id: usize, indices: Vec<usize>, dataset: &Dataset) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid(format!("client {id} has no data")));
        }
        let local = dataset.subset(&indices)?;
        Ok(ClientState {
            id,
            indices,
            local,
            params: None,
            control_variate: None,
            cluster: None,
            local_steps_taken: 0,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn data(&self) -> &Dataset {
        &self.local
    }

    pub fn num_samples(&self) -> usize {
        self.indices.len()
    }
}

/// Builds one client per partition entry.
pub fn make_clients(dataset: &Dataset, partition: &Partition) -> Result<Vec<ClientState>> {
    partition
        .clients()
        .iter()
        .enumerate()
        .map(|(id, idx)| ClientState::new(id, idx.clone(), dataset))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: ModelParams,
    pub server_control: Option<Vec<f64>>,
    /// Number of completed rounds.
    pub round: usize,
    pub seed: u64,
}

impl ServerState {
    pub fn new(global: ModelParams, algorithm: Algorithm, seed: u64) -> Self {
        let server_control = (algorithm == Algorithm::Scaffold).then(|| vec![0.0; global.len()]);
        ServerState {
            global,
            server_control,
            round: 0,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay: f64,
    pub algorithm: Algorithm,
    pub prox_mu: f64,
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1 (at least one local step)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be > 0"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("decay", "must be in (0, 1]"));
        }
        if !(self.prox_mu >= 0.0) || !self.prox_mu.is_finite() {
            return Err(Error::config("prox_mu", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub client_id: usize,
    pub new_params: ModelParams,
    pub delta_control: Option<Vec<f64>>,
    pub num_samples: usize,
    pub local_steps: usize,
}

/// Shuffle seed for one client in one round.
pub fn local_seed(master: u64, round: usize, client: usize) -> u64 {
    seed::derive(master, &[Stream::LocalShuffle as u64, round as u64, client as u64])
}

/// Runs `cfg.epochs` epochs of mini-batch SGD on the client's own data,
/// starting from `global`. The learning rate is multiplied by `cfg.decay`
/// after every epoch.
pub fn local_train(
    client: &ClientState,
    global: &ModelParams,
    cfg: &LocalConfig,
    server_control: Option<&[f64]>,
    shuffle_seed: u64,
) -> Result<LocalUpdate> {
    cfg.validate()?;
    let data = client.data();
    if data.dim() != global.spec().input_dim() {
        return Err(Error::DimensionMismatch {
            context: "client features",
            expected: global.spec().input_dim(),
            actual: data.dim(),
        });
    }
    let scaffold = match cfg.algorithm {
        Algorithm::Scaffold => {
            let c = server_control.ok_or_else(|| Error::invalid("scaffold requires a server control variate"))?;
            if c.len() != global.len() {
                return Err(Error::DimensionMismatch {
                    context: "server control variate",
                    expected: global.len(),
                    actual: c.len(),
                });
            }
            let zeros;
            let ci = match &client.control_variate {
                Some(ci) => ci.as_slice(),
                None => {
                    zeros = vec![0.0; global.len()];
                    &zeros[..]
                }
            };
            if ci.len() != global.len() {
                return Err(Error::DimensionMismatch {
                    context: "client control variate",
                    expected: global.len(),
                    actual: ci.len(),
                });
            }
            // g - c_i + c, applied per step
            Some((ci.to_vec(), c.to_vec()))
        }
        _ => None,
    };
    let (prox_mu, anchor) = match cfg.algorithm {
        Algorithm::FedProx if cfg.prox_mu > 0.0 => (cfg.prox_mu, Some(global)),
        _ => (0.0, None),
    };

    let m = data.len();
    let batch = cfg.batch_size.min(m);
    let mut rng = seed::rng(shuffle_seed);
    let mut order: Vec<usize> = (0..m).collect();
    let mut params = global.clone();
    let mut lr = cfg.lr;
    let mut last_lr = lr;
    let mut steps = 0usize;
    let mut batch_labels = Vec::with_capacity(batch);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let x = data.features().select_rows(chunk);
            batch_labels.clear();
            batch_labels.extend(chunk.iter().map(|&i| data.labels()[i]));
            let (_, mut grad) = nn::loss_and_grad(&params, &x, &batch_labels, prox_mu, anchor)?;
            if let Some((ci, c)) = &scaffold {
                for ((g, a), b) in grad.iter_mut().zip(ci).zip(c) {
                    *g = *g - a + b;
                }
            }
            params = nn::sgd_step(&params, &grad, lr, cfg.decay)?;
            steps += 1;
        }
        last_lr = lr;
        lr *= cfg.decay;
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("local parameters"));
    }

    let delta_control = scaffold.map(|(ci, c)| {
        let scale = 1.0 / (steps as f64 * last_lr);
        let mut delta = Vec::with_capacity(ci.len());
        for (((g, w), a), b) in global.values().iter().zip(params.values()).zip(&ci).zip(&c) {
            let ci_new = a - b + (g - w) * scale;
            delta.push(ci_new - a);
        }
        delta
    });
    if let Some(d) = &delta_control {
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("control variate"));
        }
    }

    Ok(LocalUpdate {
        client_id: client.id,
        new_params: params,
        delta_control,
        num_samples: m,
        local_steps: steps,
    })
}

fn sorted_by_client(updates: &[LocalUpdate]) -> Result<Vec<&LocalUpdate>> {
    if updates.is_empty() {
        return Err(Error::invalid("no updates to aggregate"));
    }
    let mut refs: Vec<&LocalUpdate> = updates.iter().collect();
    refs.sort_by_key(|u| u.client_id);
    let len = refs[0].new_params.len();
    if let Some(bad) = refs.iter().find(|u| u.new_params.len() != len) {
        return Err(Error::DimensionMismatch {
            context: "update parameters",
            expected: len,
            actual: bad.new_params.len(),
        });
    }
    Ok(refs)
}

fn weighted_sum(refs: &[&LocalUpdate], denominator: f64) -> ModelParams {
    let first = &refs[0].new_params;
    let mut acc = vec![0.0; first.len()];
    for u in refs {
        let w = u.num_samples as f64 / denominator;
        for (a, v) in acc.iter_mut().zip(u.new_params.values()) {
            *a += w * v;
        }
    }
    first.with_values(acc)
}

/// Size-weighted mean of the uploaded parameters, normalized by the sampled
/// clients' total size.
pub fn aggregate_fedavg(updates: &[LocalUpdate]) -> Result<ModelParams> {
    aggregate_fedavg_with(updates, WeightDenominator::SampledSum, 0)
}

/// `global_size` is only read for [`WeightDenominator::Global`].
pub fn aggregate_fedavg_with(updates: &[LocalUpdate], denominator: WeightDenominator, global_size: usize) -> Result<ModelParams> {
    let refs = sorted_by_client(updates)?;
    let denom = match denominator {
        WeightDenominator::SampledSum => refs.iter().map(|u| u.num_samples).sum::<usize>(),
        WeightDenominator::Global => global_size,
    };
    if denom == 0 {
        return Err(Error::invalid("aggregation weights have a zero denominator"));
    }
    Ok(weighted_sum(&refs, denom as f64))
}

/// FedAvg parameters plus `c <- c + (|s| / N) * mean(delta_control)`.
pub fn aggregate_scaffold(
    server_control: &[f64],
    updates: &[LocalUpdate],
    total_clients: usize,
    denominator: WeightDenominator,
    global_size: usize,
) -> Result<(ModelParams, Vec<f64>)> {
    let params = aggregate_fedavg_with(updates, denominator, global_size)?;
    let refs = sorted_by_client(updates)?;
    if total_clients < refs.len() {
        return Err(Error::invalid("total client count smaller than the number of updates"));
    }
    let mut mean = vec![0.0; server_control.len()];
    for u in &refs {
        let d = u
            .delta_control
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("update from client {} has no control delta", u.client_id)))?;
        if d.len() != mean.len() {
            return Err(Error::DimensionMismatch {
                context: "control delta",
                expected: mean.len(),
                actual: d.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(d) {
            *m += v;
        }
    }
    let scale = 1.0 / total_clients as f64;
    let control = server_control
        .iter()
        .zip(&mean)
        .map(|(c, s)| c + s * scale)
        .collect();
    Ok((params, control))
}

/// Normalized averaging: client displacements are divided by their local
/// step counts, averaged by size, and rescaled by the effective step count.
pub fn aggregate_fednova(global: &ModelParams, updates: &[LocalUpdate]) -> Result<ModelParams> {
    let refs = sorted_by_client(updates)?;
    if let Some(u) = refs.iter().find(|u| u.local_steps == 0) {
        return Err(Error::invalid(format!("client {} reports zero local steps", u.client_id)));
    }
    if global.len() != refs[0].new_params.len() {
        return Err(Error::DimensionMismatch {
            context: "global parameters",
            expected: refs[0].new_params.len(),
            actual: global.len(),
        });
    }
    // Equal step counts make the normalization an identity; take the FedAvg
    // path so the result is bit-identical to it.
    if refs.iter().all(|u| u.local_steps == refs[0].local_steps) {
        let total: usize = refs.iter().map(|u| u.num_samples).sum();
        return Ok(weighted_sum(&refs, total as f64));
    }
    let total = refs.iter().map(|u| u.num_samples).sum::<usize>() as f64;
    let tau_eff: f64 = refs
        .iter()
        .map(|u| u.num_samples as f64 / total * u.local_steps as f64)
        .sum();
    let mut direction = vec![0.0; global.len()];
    for u in &refs {
        let coef = u.num_samples as f64 / total / u.local_steps as f64;
        for ((d, g), w) in direction.iter_mut().zip(global.values()).zip(u.new_params.values()) {
            *d += coef * (g - w);
        }
    }
    let values = global
        .values()
        .iter()
        .zip(&direction)
        .map(|(g, d)| g - tau_eff * d)
        .collect();
    Ok(global.with_values(values))
}

#[derive(Debug, Clone)]
pub struct RoundConfig {
    pub local: LocalConfig,
    pub weight_denominator: WeightDenominator,
    /// Parallel local-training workers; 1 runs serially.
    pub workers: usize,
}

/// Read-only context a round is evaluated against.
#[derive(Debug, Clone, Copy)]
pub struct RoundEnv<'a> {
    pub test: &'a Dataset,
    pub train_labels: &'a [usize],
    pub partition: &'a Partition,
    pub num_classes: usize,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub server: ServerState,
    pub metrics: RoundMetrics,
    /// Surviving local updates, sorted by client id.
    pub updates: Vec<LocalUpdate>,
}

/// Trains every sampled client from the same global snapshot, aggregates,
/// and evaluates. Clients whose training diverges are dropped with a warning.
/// `one_time_bytes` is charged to this round's cost record.
pub fn run_round(
    server: &ServerState,
    clients: &mut [ClientState],
    plan: &SamplingPlan,
    cfg: &RoundConfig,
    env: &RoundEnv<'_>,
    ledger: &mut CostLedger,
    one_time_bytes: u64,
) -> Result<RoundOutcome> {
    if plan.selected.is_empty() {
        return Err(Error::invalid("sampling plan selects no clients"));
    }
    if let Some(&bad) = plan.selected.iter().find(|&&id| id >= clients.len()) {
        return Err(Error::invalid(format!("plan references unknown client {bad}")));
    }
    cfg.local.validate()?;
    let round = server.round + 1;
    let algorithm = cfg.local.algorithm;
    let server_control = server.server_control.as_deref();
    if algorithm == Algorithm::Scaffold && server_control.is_none() {
        return Err(Error::invalid("scaffold requires server control storage"));
    }

    let train = |id: &usize| {
        let client = &clients[*id];
        let seed = local_seed(server.seed, round, *id);
        (*id, local_train(client, &server.global, &cfg.local, server_control, seed))
    };
    let results: Vec<(usize, Result<LocalUpdate>)> = if cfg.workers > 1 {
        plan.selected.par_iter().map(train).collect()
    } else {
        plan.selected.iter().map(train).collect()
    };

    let mut updates = Vec::with_capacity(results.len());
    let mut dropped = 0;
    for (id, res) in results {
        match res {
            Ok(u) => updates.push(u),
            Err(Error::NonFinite(what)) => {
                log::warn!("round {round}: client {id} diverged ({what}); update dropped");
                dropped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    updates.sort_by_key(|u| u.client_id);

    let global_size = env.partition.total();
    let mut next = server.clone();
    next.round = round;
    if !updates.is_empty() {
        match algorithm {
            Algorithm::FedAvg | Algorithm::FedProx => {
                next.global = aggregate_fedavg_with(&updates, cfg.weight_denominator, global_size)?;
            }
            Algorithm::Scaffold => {
                let (params, control) = aggregate_scaffold(
                    server_control.unwrap(),
                    &updates,
                    clients.len(),
                    cfg.weight_denominator,
                    global_size,
                )?;
                next.global = params;
                next.server_control = Some(control);
            }
            Algorithm::FedNova => {
                next.global = aggregate_fednova(&server.global, &updates)?;
            }
        }
        if !next.global.is_finite() {
            log::warn!("round {round}: aggregate is non-finite; keeping previous global model");
            next.global = server.global.clone();
        }
    } else {
        log::warn!("round {round}: every sampled client diverged; global model unchanged");
    }

    for u in &updates {
        let client = &mut clients[u.client_id];
        if let Some(delta) = &u.delta_control {
            let ci = client.control_variate.get_or_insert_with(|| vec![0.0; delta.len()]);
            ci.iter_mut().zip(delta).for_each(|(c, d)| *c += d);
        }
        client.params = Some(u.new_params.clone());
        client.local_steps_taken += u.local_steps;
    }

    let (accuracy, loss) = metrics::evaluate_global(&next.global, env.test)?;
    let entropy = metrics::sample_relative_entropy(plan, env.partition, env.train_labels, env.num_classes)?;
    let cost = ledger.record_round(round, plan.selected.len(), algorithm, one_time_bytes);
    let metrics = RoundMetrics {
        round,
        test_accuracy: accuracy,
        test_loss: loss,
        sample_relative_entropy: entropy,
        cumulative_bytes: cost.cumulative_bytes,
        dropped,
    };
    Ok(RoundOutcome {
        server: next,
        metrics,
        updates,
    })
}
