use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate_fedavg, aggregate_feddrop, ServerState};
use super::client::{init_clients, local_train, ClientData, ClientState, FedConfig, Strategy};
use super::wire::ClientUpdate;
use crate::error::{Error, Result};
use crate::eval::perplexity;
use crate::model::{ModelConfig, Seq2SeqModel, SpeakerId};
use crate::rng::{derive_seed, seeded};
use crate::tensor::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    pub client_id: SpeakerId,
    pub delta_l2: f64,
    pub train_nll: f64,
    /// Dev perplexity of the new shared parameters with this client's persona.
    pub dev_ppl: Option<f64>,
}

/// One line of the round log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based.
    pub round: usize,
    pub strategy: Strategy,
    pub participants: Vec<SpeakerId>,
    /// Clients whose update entered the aggregate.
    pub aggregated: Vec<SpeakerId>,
    pub clients: Vec<ClientRoundStats>,
    /// L2 norm of the change in shared parameters.
    pub aggregate_l2: f64,
    pub wallclock: Option<f64>,
}

#[derive(Debug)]
pub struct RoundOutcome {
    pub record: RoundRecord,
    /// Every client message exactly as the server received it.
    pub messages: Vec<Vec<u8>>,
}

/// Shared parameters of a `config` model lifted from a (possibly
/// persona-free) pre-trained set; tensors the pre-trained set lacks are
/// initialised from `seed`.
pub fn lift_pretrained(pretrained: &ParamSet, config: &ModelConfig, seed: u64) -> Result<ParamSet> {
    Ok(Seq2SeqModel::from_pretrained(pretrained, config.clone(), seed)?
        .params()
        .federated())
}

fn client_dev_ppl(client: &ClientState, shared: &ParamSet) -> Result<Option<f64>> {
    if client.dev.is_empty() {
        return Ok(None);
    }
    let mut model = client.model.clone();
    model.params_mut().copy_values_from(shared)?;
    Ok(Some(perplexity(&model, &client.dev)?))
}

/// One synchronous round over `clients`: broadcast the shared parameters,
/// train every client locally, ship the deltas through the wire format and
/// aggregate them. Clients keep their locally trained values until the
/// next broadcast.
pub fn run_round(server: &mut ServerState, clients: &mut [ClientState], cfg: &FedConfig) -> Result<RoundOutcome> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::Aggregation("a round needs at least one client".into()));
    }
    let start = Instant::now();
    let round = server.round();
    let anchor = server.params().clone();
    let total_samples: usize = clients.iter().map(ClientState::sample_count).sum();

    let trained: Vec<(Vec<u8>, f64)> = clients
        .par_iter_mut()
        .map(|c| {
            c.model.params_mut().copy_values_from(&anchor)?;
            let own_row = c.client_id;
            let before = match c.model.config().persona_enabled {
                true => Some(c.model.persona_row(own_row)?.to_vec()),
                false => None,
            };
            let (update, nll) = local_train(c, &anchor, cfg, round)?;
            if let (true, Some(before)) = (cfg.literal_private_scaling, before) {
                let share = c.sample_count() as f64 / total_samples as f64;
                let after = c.model.persona_row(own_row)?;
                let scaled: Vec<f64> = before.iter().zip(after).map(|(b, a)| b + share * (a - b)).collect();
                c.model.set_persona_row(own_row, &scaled)?;
            }
            Ok((update.to_bytes(), nll))
        })
        .collect::<Result<_>>()?;

    let updates: Vec<ClientUpdate> = trained
        .iter()
        .map(|(bytes, _)| ClientUpdate::from_bytes(bytes))
        .collect::<Result<_>>()?;
    let aggregated = match cfg.strategy {
        Strategy::FedDrop => {
            let mut rng = seeded(derive_seed(cfg.seed, &[0x6472_6f70, round as u64]));
            aggregate_feddrop(server, &updates, cfg.drop_fraction, &mut rng)?
        }
        Strategy::FedAvg | Strategy::FedProx => {
            aggregate_fedavg(server, &updates)?;
            let mut ids: Vec<SpeakerId> = updates.iter().map(ClientUpdate::client_id).collect();
            ids.sort();
            ids
        }
    };

    let aggregate_l2 = anchor
        .iter()
        .map(|t| {
            let new = server.params().value(&t.name).expect("server schema is fixed");
            new.data().iter().zip(t.value.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
        .sum::<f64>()
        .sqrt();
    let dev: Vec<Option<f64>> = clients
        .par_iter()
        .map(|c| client_dev_ppl(c, server.params()))
        .collect::<Result<_>>()?;
    let stats = clients
        .iter()
        .zip(&updates)
        .zip(&trained)
        .zip(dev)
        .map(|(((c, u), (_, nll)), dev_ppl)| ClientRoundStats {
            client_id: c.client_id,
            delta_l2: u.delta_norm(),
            train_nll: *nll,
            dev_ppl,
        })
        .collect();
    let record = RoundRecord {
        round: server.round(),
        strategy: cfg.strategy,
        participants: clients.iter().map(|c| c.client_id).collect(),
        aggregated,
        clients: stats,
        aggregate_l2,
        wallclock: cfg.record_wallclock.then(|| start.elapsed().as_secs_f64()),
    };
    Ok(RoundOutcome {
        record,
        messages: trained.into_iter().map(|(b, _)| b).collect(),
    })
}

#[derive(Debug)]
pub struct Simulation {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub log: Vec<RoundRecord>,
    /// Dev perplexity of each client before the first round.
    pub initial_dev_ppl: BTreeMap<SpeakerId, f64>,
}

impl Simulation {
    /// Mean over clients of the latest dev perplexity (the initial one if
    /// no round ran). `None` if no client has dev data.
    pub fn final_mean_dev_ppl(&self) -> Option<f64> {
        match self.log.last() {
            Some(r) => mean(r.clients.iter().filter_map(|c| c.dev_ppl)),
            None => mean(self.initial_dev_ppl.values().copied()),
        }
    }

    pub fn initial_mean_dev_ppl(&self) -> Option<f64> {
        mean(self.initial_dev_ppl.values().copied())
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Full fine-tuning run: clients start from `initial` (all shared tensors of
/// a `config` model), then `cfg.total_rounds` rounds follow. `observer` sees
/// each round's record and raw client messages.
pub fn run_simulation(
    initial: &ParamSet,
    config: &ModelConfig,
    data: Vec<ClientData>,
    cfg: &FedConfig,
    mut observer: impl FnMut(&RoundRecord, &[Vec<u8>]),
) -> Result<Simulation> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut server = ServerState::new(initial.federated())?;
    let mut clients = init_clients(initial, config, data, cfg.seed)?;
    server.params().check_schema(&clients[0].model.params().federated())?;
    let initial_dev_ppl = pool
        .install(|| {
            clients
                .par_iter()
                .map(|c| Ok(client_dev_ppl(c, server.params())?.map(|p| (c.client_id, p))))
                .collect::<Result<Vec<_>>>()
        })?
        .into_iter()
        .flatten()
        .collect();
    let mut log = Vec::with_capacity(cfg.total_rounds);
    for _ in 0..cfg.total_rounds {
        let out = pool.install(|| run_round(&mut server, &mut clients, cfg))?;
        observer(&out.record, &out.messages);
        log::info!(
            "round {} ({}): aggregate change {:.4e}",
            out.record.round,
            cfg.strategy,
            out.record.aggregate_l2
        );
        log.push(out.record);
    }
    Ok(Simulation {
        server,
        clients,
        log,
        initial_dev_ppl,
    })
}
